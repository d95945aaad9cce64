"""Weighting measure, the T and V operators, the Q Gram matrix, and Fourier inversion.

Conventions follow :mod:`rcsieve.basis`.  With ``a(t, s)`` the bivariate
Fourier transform of the basis, the sieve coefficient operator is

    T(w, y) = int conj(a(t, t w)) exp(i t y) dnu(t)

and the matching Gram matrix is ``Q = E_W int conj(a) a^T dnu``, so that
``Q^{-1} E[T]`` returns the coefficients of any density lying in the sieve.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .basis import HermiteBasis, hermite_functions

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class WeightingMeasure:
    """Discrete lognormal(0, sigma_t) measure on t > 0."""

    sigma_t: float
    nodes: np.ndarray
    weights: np.ndarray

    def moment(self, p: float) -> float:
        return float(np.sum(self.weights * self.nodes ** p))


def build_measure(sigma_t: float, n_nodes: int = 64) -> WeightingMeasure:
    """Gauss-Hermite rule in log-space mapped through ``t = exp(sigma_t * z)``."""
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    if n_nodes < 8:
        raise ValueError("n_nodes must be at least 8")
    z, w = hermegauss(n_nodes)
    w = w / w.sum()
    return WeightingMeasure(float(sigma_t), np.exp(sigma_t * z), w)


def _conj_phase(basis: HermiteBasis) -> np.ndarray:
    return np.conj(basis.phase)


def t_operator(basis: HermiteBasis, measure: WeightingMeasure, w, y) -> np.ndarray:
    """T(w, y) for broadcastable arrays ``w``, ``y``; shape ``(..., K)`` complex."""
    w, y = np.broadcast_arrays(np.asarray(w, float), np.asarray(y, float))
    shape = w.shape
    w = w.reshape(-1)
    y = y.reshape(-1)
    t, om = measure.nodes, measure.weights
    # nodes far in the tail carry no mass through the Gaussian factor
    keep = t < 40.0
    t, om = t[keep], om[keep]
    h1 = hermite_functions(basis.K1 - 1, t)                       # J, K1
    h2 = hermite_functions(basis.K2 - 1, t[None, :] * w[:, None])  # n, J, K2
    e = om[None, :] * np.exp(1j * t[None, :] * y[:, None])         # n, J
    out = np.einsum("nj,ja,njb->nba", e, h1, h2).reshape(len(w), basis.K)
    out *= TWO_PI * _conj_phase(basis)
    return out.reshape(shape + (basis.K,))


@dataclass
class QMatrix:
    entries: np.ndarray
    ridge_used: float = 0.0
    inverse: np.ndarray | None = None
    min_eig: float = field(default=np.nan)
    max_eig: float = field(default=np.nan)

    @property
    def K(self) -> int:
        return self.entries.shape[0]


def _transform_rows(basis: HermiteBasis, measure: WeightingMeasure, w: np.ndarray):
    """Rows ``sqrt(omega_j) * conj(a(t_j, t_j w_i))``; shape ``(n, J, K)``."""
    t, om = measure.nodes, measure.weights
    keep = t < 40.0
    t, om = t[keep], om[keep]
    h1 = hermite_functions(basis.K1 - 1, t)
    h2 = hermite_functions(basis.K2 - 1, t[None, :] * w[:, None])
    a = (h2[:, :, :, None] * h1[None, :, None, :]).reshape(len(w), len(t), basis.K)
    return a * (np.sqrt(om)[None, :, None] * TWO_PI * _conj_phase(basis))


def q_matrix(basis: HermiteBasis, measure: WeightingMeasure, w_samples,
             chunk: int = 2048) -> QMatrix:
    """Sample Gram matrix of the transformed basis over ``nu`` and the empirical W."""
    w = np.asarray(w_samples, float).reshape(-1)
    if w.size == 0:
        raise ValueError("q_matrix needs at least one W sample")
    acc = np.zeros((basis.K, basis.K), complex)
    for lo in range(0, w.size, chunk):
        a = _transform_rows(basis, measure, w[lo:lo + chunk])
        a = a.reshape(-1, basis.K)
        acc += a.T @ a.conj()
    q = acc / w.size
    q = 0.5 * (q + q.conj().T)
    eig = np.linalg.eigvalsh(q)
    return QMatrix(entries=q, min_eig=float(eig[0]), max_eig=float(eig[-1]))


def q_inverse(Q: QMatrix, ridge: float = 0.0) -> QMatrix:
    """Invert ``Q + ridge * I`` through its eigendecomposition.

    With ``ridge == 0`` and a numerically singular Q an automatic floor of
    ``1e-10 * max_eig`` is added and recorded in ``ridge_used``.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    vals, vecs = np.linalg.eigh(Q.entries)
    max_eig = float(vals[-1])
    if ridge == 0.0 and vals[0] < 1e-12 * max(max_eig, 0.0):
        ridge = 1e-10 * max_eig if max_eig > 0 else 1e-12
        warnings.warn(f"Q is near singular (min eig {vals[0]:.3e}); ridge {ridge:.3e} applied",
                      RuntimeWarning, stacklevel=2)
    inv = (vecs / (vals + ridge)) @ vecs.conj().T
    return QMatrix(entries=Q.entries, ridge_used=float(ridge), inverse=inv,
                   min_eig=float(vals[0]), max_eig=max_eig)


def default_t_rule(n_nodes: int = 256, t_max: float = 12.0):
    """Gauss-Legendre rule on ``(0, t_max]``."""
    x, w = leggauss(n_nodes)
    return 0.5 * t_max * (x + 1.0), 0.5 * t_max * w


def v_operator(basis: HermiteBasis, w, y, fW_at_w, t_rule=None) -> np.ndarray:
    """Cross-validation transform V(y, w) / f_W(w), real, shape ``(..., K)``.

    ``V_k(y, w) = (2 pi)^-2 int |t| exp(i t y) (F q_k)(-t, -t w) dt``; the
    integrand is conjugate symmetric in t so only ``t > 0`` is integrated.
    """
    fW = np.asarray(fW_at_w, float)
    if np.any(fW <= 0):
        raise ValueError("density value for W must be positive")
    raw = v_operator_complex(basis, w, y, t_rule)
    return raw.real / fW[..., None]


def v_operator_complex(basis: HermiteBasis, w, y, t_rule=None) -> np.ndarray:
    """Half-line accumulation before taking the real part (diagnostic)."""
    t, tw = default_t_rule() if t_rule is None else t_rule
    w, y = np.broadcast_arrays(np.asarray(w, float), np.asarray(y, float))
    shape = w.shape
    w = w.reshape(-1)
    y = y.reshape(-1)
    h1 = hermite_functions(basis.K1 - 1, t)
    h2 = hermite_functions(basis.K2 - 1, t[None, :] * w[:, None])
    e = (tw * t)[None, :] * np.exp(1j * t[None, :] * y[:, None])
    out = np.einsum("nj,ja,njb->nba", e, h1, h2).reshape(len(w), basis.K)
    out *= TWO_PI * _conj_phase(basis) * (2.0 / (TWO_PI ** 2))
    return out.reshape(shape + (basis.K,))


def polar_rule(r_max: float = 12.0, n_r: int = 100, n_theta: int = 128):
    """Quadrature on the plane in polar form, returned in ``(t, w)`` coordinates.

    ``s = (t, t w) = r (cos th, sin th)`` with ``r`` in ``(0, r_max)`` and
    ``th`` in ``(-pi, pi)``, so ``t = r cos th`` and ``w = tan th``;
    ``|t| dt dw = r dr dth``.  Returns ``(t, w, weight)`` with the Jacobian
    folded into ``weight``.  Unlike a truncated ``(t, w)`` box this covers
    directions close to the slope axis (``|w|`` large).
    """
    xr, wr = leggauss(n_r)
    r, wr = 0.5 * r_max * (xr + 1.0), 0.5 * r_max * wr
    xt, wt = leggauss(n_theta)
    th, wt = np.pi * xt, np.pi * wt
    R, TH = np.meshgrid(r, th, indexing="ij")
    weight = R * wr[:, None] * wt[None, :]
    return (R * np.cos(TH)).ravel(), np.tan(TH).ravel(), weight.ravel()


def fourier_inversion_oracle(phi: Callable, b0_grid, b1_grid, t_rule=None, w_rule=None,
                             return_complex: bool = False):
    """Density from a conditional characteristic function by double Fourier inversion.

    ``f(b) = (2 pi)^-2 int int |t| exp(-i b'(t, t w)) phi(t, w) dt dw``.

    ``t_rule``/``w_rule`` are ``(nodes, weights)`` pairs for a Cartesian
    truncated rule; when omitted a polar rule covering all of ``R x R`` is
    used.  Returns a ``len(b0_grid) x len(b1_grid)`` array.
    """
    b0 = np.asarray(b0_grid, float)
    b1 = np.asarray(b1_grid, float)
    if t_rule is None or w_rule is None:
        t, w, wt = polar_rule()
    else:
        T, Wg = np.meshgrid(t_rule[0], w_rule[0], indexing="ij")
        wt = (np.abs(T) * t_rule[1][:, None] * w_rule[1][None, :]).ravel()
        t, w = T.ravel(), Wg.ravel()
    g = wt * phi(t, w)
    s0, s1 = t, t * w
    e0 = np.exp(-1j * np.outer(b0, s0))
    e1 = np.exp(-1j * np.outer(s1, b1))
    f = (e0 * g[None, :]) @ e1 / TWO_PI ** 2
    return f if return_complex else f.real

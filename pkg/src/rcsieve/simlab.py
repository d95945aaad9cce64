"""Simulation designs with known conditional densities and a Monte Carlo harness.

Both designs share ``B0 = sin(X1) + A0`` and ``W = 1 + X3 + (1 + X3^2) V`` with
``A0, V, X`` independent standard normal.  The slope mixes ``N(-1.5, 1)`` and
``N(1.5, 1/2)`` (variance one half):

* ``dgp1``: ``B1 = X2 + 0.5 X3 + 0.25 X2 X3 + A1`` with equal weights;
* ``dgp2``: ``B1`` is the mixture itself with weight ``Phi(X2)`` on the
  negative component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .basis import HermiteBasis, basis_matrix, fourier_basis_eval
from .forest import UnsupportedOperation
from .pipeline import ConfigurationError, Dataset, SieveConfig, fit_conditional_density, slope_density
from .transforms import WeightingMeasure, build_measure

LEFT_MEAN, LEFT_SD = -1.5, 1.0
RIGHT_MEAN, RIGHT_SD = 1.5, math.sqrt(0.5)
ISE_GRID = np.linspace(-8.0, 8.0, 321)


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "dgp1"
    n: int = 1000
    p: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dgp1", "dgp2"):
            raise ValueError(f"unknown design {self.kind!r}")
        if self.p < 3:
            raise ValueError("p must be at least 3")
        if self.n < 1:
            raise ValueError("n must be positive")


def default_test_point(p: int = 10) -> np.ndarray:
    x = np.zeros(p)
    x[1] = 0.3
    return x


def slope_center(x) -> float:
    """``E[B1 | X = x]`` shift of the dgp1 slope: ``x2 + 0.5 x3 + 0.25 x2 x3``."""
    x = np.asarray(x, float)
    return float(x[1] + 0.5 * x[2] + 0.25 * x[1] * x[2])


def _draw_mixture(rng, left_weight):
    left = rng.random(np.shape(left_weight)) < left_weight
    draw = np.where(left, rng.normal(LEFT_MEAN, LEFT_SD, left.shape),
                    rng.normal(RIGHT_MEAN, RIGHT_SD, left.shape))
    return draw, left


def _generate(kind, n, p, seed, fixed=None, return_coefficients=False):
    if n < 1 or p < 3:
        raise ValueError("need n >= 1 and p >= 3")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    for col, value in (fixed or {}).items():
        X[:, col] = value
    A0 = rng.standard_normal(n)
    V = rng.standard_normal(n)
    if kind == "dgp1":
        A1, left = _draw_mixture(rng, np.full(n, 0.5))
        B1 = X[:, 1] + 0.5 * X[:, 2] + 0.25 * X[:, 1] * X[:, 2] + A1
    else:
        B1, left = _draw_mixture(rng, norm.cdf(X[:, 1]))
    B0 = np.sin(X[:, 0]) + A0
    W = 1.0 + X[:, 2] + (1.0 + X[:, 2] ** 2) * V
    data = Dataset(B0 + B1 * W, W, X)
    if return_coefficients:
        return data, B0, B1, left
    return data


def generate_dgp1(n: int, p: int = 10, seed: int = 0, fixed: dict | None = None,
                  return_coefficients: bool = False):
    """Draw from the first design; ``fixed`` maps column index to a constant."""
    return _generate("dgp1", n, p, seed, fixed, return_coefficients)


def generate_dgp2(n: int, p: int = 10, seed: int = 0, fixed: dict | None = None,
                  return_coefficients: bool = False):
    """Draw from the second design; ``fixed`` maps column index to a constant."""
    return _generate("dgp2", n, p, seed, fixed, return_coefficients)


def generate(spec: DgpSpec, seed: int | None = None):
    gen = generate_dgp1 if spec.kind == "dgp1" else generate_dgp2
    return gen(spec.n, spec.p, spec.seed if seed is None else seed)


def _mixture_pdf(b, left_weight, center=0.0):
    b = np.asarray(b, float) - center
    return (left_weight * norm.pdf(b, LEFT_MEAN, LEFT_SD)
            + (1 - left_weight) * norm.pdf(b, RIGHT_MEAN, RIGHT_SD))


def true_conditional_density(spec: DgpSpec | str, x, b1_grid) -> np.ndarray:
    """Density of ``B1`` given ``X = x`` under the design."""
    kind = spec if isinstance(spec, str) else spec.kind
    x = np.asarray(x, float)
    if kind == "dgp1":
        return _mixture_pdf(b1_grid, 0.5, slope_center(x))
    return _mixture_pdf(b1_grid, norm.cdf(x[1]))


def true_joint_density(spec: DgpSpec | str, x):
    """Callable ``f(b0, b1)`` for the joint density of ``(B0, B1)`` given ``X = x``."""
    x = np.asarray(x, float)
    mu0 = math.sin(x[0])

    def f(b0, b1):
        return norm.pdf(np.asarray(b0, float) - mu0) * true_conditional_density(spec, x, b1)

    return f


def _left_weight(kind: str, x) -> float:
    return 0.5 if kind == "dgp1" else float(norm.cdf(np.asarray(x, float)[1]))


def slope_mean(spec: DgpSpec | str, x) -> float:
    """``E[B1 | X = x]``."""
    kind = spec if isinstance(spec, str) else spec.kind
    p = _left_weight(kind, x)
    mix = p * LEFT_MEAN + (1 - p) * RIGHT_MEAN
    return mix + (slope_center(x) if kind == "dgp1" else 0.0)


def centred_characteristic(spec: DgpSpec | str, x):
    """Characteristic function of ``B - E[B | X = x]`` given ``X = x``: ``phi(t, s)``."""
    kind = spec if isinstance(spec, str) else spec.kind
    p = _left_weight(kind, x)
    shift = p * LEFT_MEAN + (1 - p) * RIGHT_MEAN

    def phi(t, s):
        t, s = np.asarray(t, float), np.asarray(s, float)
        slope = (p * np.exp(1j * (LEFT_MEAN - shift) * s - 0.5 * (LEFT_SD * s) ** 2)
                 + (1 - p) * np.exp(1j * (RIGHT_MEAN - shift) * s - 0.5 * (RIGHT_SD * s) ** 2))
        return np.exp(-0.5 * t * t) * slope

    return phi


def infeasible_coefficients(spec: DgpSpec | str, x, basis: HermiteBasis,
                            measure: WeightingMeasure, w_samples):
    """Sieve coefficients ``Q^-1 Pi(x)`` computed from the true conditional law.

    ``Pi(x) = mean_i int conj(a(t, t W_i)) phi(t, t W_i) dnu(t)`` with ``phi`` the
    characteristic function of the centred coefficients, and ``Q`` the Gram
    matrix on the same ``w_samples``.  Returns the complex coefficient vector.
    """
    w = np.asarray(w_samples, float).reshape(-1)
    t, om = measure.nodes, measure.weights
    keep = t < 40.0
    t, om = t[keep], om[keep]
    phi = centred_characteristic(spec, x)
    Q = np.zeros((basis.K, basis.K), complex)
    Pi = np.zeros(basis.K, complex)
    for lo in range(0, len(w), 2048):
        wc = w[lo:lo + 2048]
        a = fourier_basis_eval(basis, t[None, :], t[None, :] * wc[:, None])   # n, J, K
        ac = a.conj() * om[None, :, None]
        Q += np.einsum("njk,njl->kl", ac, a)
        Pi += np.einsum("njk,nj->k", ac, phi(t[None, :], t[None, :] * wc[:, None]))
    return np.linalg.solve(Q, Pi)


def infeasible_ise(spec: DgpSpec | str, x, K1: int, K2: int, sigma_t: float = 1.0,
                   n_w: int = 20000, seed: int = 0, step: float = 0.05) -> float:
    """Joint ISE of the best sieve approximation built from the true coefficients.

    Measures the approximation error alone: no regression noise, W drawn from
    its marginal law, evaluated on ``[-8, 8]^2`` around the conditional mean.
    """
    kind = spec if isinstance(spec, str) else spec.kind
    x = np.asarray(x, float)
    w = generate(DgpSpec(kind, n_w, len(x), seed)).W
    basis = HermiteBasis(K1, K2)
    coef = infeasible_coefficients(kind, x, basis, build_measure(sigma_t), w)
    g = np.arange(-8.0, 8.0 + step / 2, step)
    A0, A1 = np.meshgrid(g, g, indexing="ij")
    est = (basis_matrix(basis, A0, A1) @ coef).real
    truth = norm.pdf(A0) * true_conditional_density(kind, x, A1 + slope_mean(kind, x))
    return float(np.trapezoid(np.trapezoid((est - truth) ** 2, g, axis=1), g))


def ise(estimate, truth, grid) -> float:
    return float(np.trapezoid((np.asarray(estimate) - np.asarray(truth)) ** 2, grid))


@dataclass
class McReport:
    b1_grid: np.ndarray
    true_density: np.ndarray
    median_curve: np.ndarray
    q05_curve: np.ndarray
    q95_curve: np.ndarray
    ise: np.ndarray
    curves: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    imag_ratio: np.ndarray = field(repr=False)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return len(self.ise)


def rep_seeds(master_seed: int, reps: int) -> list[tuple[int, int]]:
    """``(data_seed, estimator_seed)`` per replication."""
    children = np.random.SeedSequence(master_seed).spawn(reps)
    return [tuple(int(v) for v in c.generate_state(2)) for c in children]


def run_monte_carlo(spec: DgpSpec, config: SieveConfig, reps: int, x=None,
                    b1_grid=None, progress=None) -> McReport:
    """Fit ``reps`` independent draws and summarize the slope density at ``x``.

    Failed fits are recorded in ``failures`` and skipped.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    x = default_test_point(spec.p) if x is None else np.asarray(x, float)
    grid = ISE_GRID if b1_grid is None else np.asarray(b1_grid, float)
    truth = true_conditional_density(spec, x, grid)
    curves, ises, masses, imags, failures = [], [], [], [], []
    for r, (data_seed, est_seed) in enumerate(rep_seeds(spec.seed, reps)):
        data = generate(spec, data_seed)
        cfg = SieveConfig(**{**config.__dict__, "test_points": x[None, :], "seed": est_seed,
                             "forest": config.forest.replace(seed=est_seed)})
        try:
            model = fit_conditional_density(data, cfg)
            dens = slope_density(model, x, grid)
        except (ValueError, ConfigurationError, UnsupportedOperation,
                np.linalg.LinAlgError) as exc:
            failures.append((r, repr(exc)))
            continue
        curves.append(dens.values)
        imags.append(dens.imag_ratio)
        masses.append(float(np.trapezoid(dens.values, grid)))
        ises.append(ise(dens.values, truth, grid))
        if progress is not None:
            progress(r, ises[-1])
    if not curves:
        raise RuntimeError(f"all {reps} replications failed: {failures[:3]}")
    curves = np.array(curves)
    q05, med, q95 = np.quantile(curves, [0.05, 0.5, 0.95], axis=0)
    echo = {"kind": spec.kind, "n": spec.n, "p": spec.p, "seed": spec.seed, "reps": reps,
            "K1": config.K1, "K2": config.K2, "sigma_t": config.sigma_t, "M": config.M,
            "mode": config.mode, "n_trees": config.forest.n_trees,
            "test_point": x.tolist()}
    return McReport(grid, truth, med, q05, q95, np.array(ises), curves, np.array(masses),
                    np.array(imags), failures, echo)

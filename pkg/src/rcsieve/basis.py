"""Normalized Hermite functions and the bivariate tensor-product sieve basis.

Indices are zero-based throughout: ``h_0(b) = pi**-0.25 * exp(-b**2 / 2)`` and
the Fourier eigenrelation reads

    (F h_k)(t) = int exp(i t a) h_k(a) da = sqrt(2 pi) * i**k * h_k(t).

A bivariate function ``q_k(b0, b1) = h_{k1}(b0) h_{k2}(b1)`` therefore has
transform ``2 pi * i**(k1 + k2) * h_{k1}(t) h_{k2}(s)``.  The flat index of the
pair ``(k1, k2)`` is ``k = k1 + K1 * k2`` (``k1`` runs fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_ORDER = 60

H0_AT_ZERO = np.pi ** -0.25


class DomainError(ValueError):
    """Raised when a Hermite order exceeds the supported range."""


def _check_order(k: int, limit: int = MAX_ORDER) -> None:
    if k < 0 or k > limit:
        raise DomainError(f"Hermite order {k} outside supported range [0, {limit}]")


def hermite_functions(kmax: int, b) -> np.ndarray:
    """Evaluate ``h_0, ..., h_kmax`` at ``b``.

    Returns an array of shape ``np.shape(b) + (kmax + 1,)``.  Uses the
    three-term recurrence, which stays finite where ``2**k k!`` would not.
    """
    _check_order(kmax)
    b = np.asarray(b, dtype=float)
    out = np.empty(b.shape + (kmax + 1,))
    out[..., 0] = H0_AT_ZERO * np.exp(-0.5 * b * b)
    if kmax >= 1:
        out[..., 1] = np.sqrt(2.0) * b * out[..., 0]
    for k in range(2, kmax + 1):
        out[..., k] = (np.sqrt(2.0 / k) * b * out[..., k - 1]
                       - np.sqrt((k - 1.0) / k) * out[..., k - 2])
    return out


def hermite_eval(k: int, b):
    """Orthonormal Hermite function ``h_k(b)``; scalar in, scalar out."""
    _check_order(k)
    val = hermite_functions(k, b)[..., k]
    return float(val) if np.ndim(val) == 0 else val


def basis_derivative(k: int, b):
    """``h_k'(b) = sqrt(k/2) h_{k-1}(b) - sqrt((k+1)/2) h_{k+1}(b)``."""
    _check_order(k, MAX_ORDER - 1)
    h = hermite_functions(k + 1, b)
    val = -np.sqrt((k + 1) / 2.0) * h[..., k + 1]
    if k > 0:
        val = val + np.sqrt(k / 2.0) * h[..., k - 1]
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True)
class HermiteBasis:
    """Tensor product of ``K1`` intercept and ``K2`` slope Hermite functions."""

    K1: int
    K2: int

    def __post_init__(self):
        if self.K1 < 1 or self.K2 < 1:
            raise ValueError("K1 and K2 must be positive")
        _check_order(max(self.K1, self.K2) - 1)

    @property
    def K(self) -> int:
        return self.K1 * self.K2

    def pair(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.K:
            raise IndexError(k)
        return k % self.K1, k // self.K1

    def flat(self, k1: int, k2: int) -> int:
        if not (0 <= k1 < self.K1 and 0 <= k2 < self.K2):
            raise IndexError((k1, k2))
        return k1 + self.K1 * k2

    @property
    def orders(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(k1, k2)`` of length K in flat order."""
        k = np.arange(self.K)
        return k % self.K1, k // self.K1

    @property
    def phase(self) -> np.ndarray:
        """``i**(k1 + k2)`` per flat index."""
        k1, k2 = self.orders
        return 1j ** ((k1 + k2) % 4)


def basis_matrix(basis: HermiteBasis, b0, b1) -> np.ndarray:
    """Tensor basis at broadcast points; shape ``broadcast(b0, b1).shape + (K,)``."""
    b0, b1 = np.broadcast_arrays(np.asarray(b0, float), np.asarray(b1, float))
    h0 = hermite_functions(basis.K1 - 1, b0)
    h1 = hermite_functions(basis.K2 - 1, b1)
    out = h0[..., None, :] * h1[..., :, None]
    return out.reshape(b0.shape + (basis.K,))


def basis_eval(basis: HermiteBasis, b0: float, b1: float) -> np.ndarray:
    return basis_matrix(basis, b0, b1)


def fourier_basis_eval(basis: HermiteBasis, t, s) -> np.ndarray:
    """Bivariate Fourier transform of every basis function at ``(t, s)``."""
    return 2.0 * np.pi * basis.phase * basis_matrix(basis, t, s)


def intercept_integrals(K1: int) -> np.ndarray:
    """``int h_k(b) db`` for ``k < K1``; equals ``sqrt(2 pi) i**k h_k(0)``."""
    h = hermite_functions(K1 - 1, 0.0)
    k = np.arange(K1)
    return np.sqrt(2.0 * np.pi) * np.real(1j ** (k % 4)) * h


def slope_basis_matrix(basis: HermiteBasis, b1) -> np.ndarray:
    """Basis with the intercept direction integrated out; shape ``b1.shape + (K,)``.

    ``int q_k(b0, b1) db0 = c_{k1} h_{k2}(b1)``, so the slope marginal of
    ``q' pi`` is ``slope_basis_matrix(b1) @ pi``.
    """
    c = intercept_integrals(basis.K1)
    h1 = hermite_functions(basis.K2 - 1, np.asarray(b1, float))
    out = c[None, :] * h1[..., :, None]
    return out.reshape(np.shape(b1) + (basis.K,))

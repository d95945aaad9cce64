"""Pointwise confidence bands for the conditional slope density.

Each coefficient is learned on its own block of the R sample, so the
coefficient estimates are independent and ``Sigma(x)`` is diagonal.  For a
linear functional ``l' Q^-1 Pi(x)`` of the coefficients the standard error is
``|| l' Q^-1 Sigma(x) ||``.  When the regressions run on rotated real
coordinates ``z`` with ``Pi = A z``, the same norm is taken over
``l' Q^-1 A diag(sd(z))``; with canonical axes the two agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .basis import basis_matrix, slope_basis_matrix
from .pipeline import ConditionalDensityModel, slope_density_complex


class InferenceUnavailable(ValueError):
    """The model was not fitted with per-coefficient blocks."""


@dataclass
class DensityBand:
    b1_grid: np.ndarray
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    M_used: int
    se: np.ndarray | None = None


def _require_inference(model: ConditionalDensityModel, m: int):
    if not 0 <= m < model.M:
        raise IndexError(f"split {m} out of range for M={model.M}")
    s = model.splits[m]
    if s.variance is None or s.blocks is None:
        raise InferenceUnavailable("model was not fitted in inference mode")
    return s


def sigma_matrix(model: ConditionalDensityModel, m: int, x, coordinates: bool = False):
    """Diagonal ``Sigma(x)`` of coefficient standard deviations for split ``m``.

    The variance of a complex coefficient is the sum of the variances of its
    real and imaginary regressions (K x K).  With ``coordinates=True`` the
    2K x 2K diagonal over the regression coordinates is returned instead; it
    is the one that matters when the axes are decorrelated.
    """
    s = _require_inference(model, m)
    var = s.variance[model._locate(x)]
    if coordinates:
        return np.diag(np.sqrt(var))
    K = model.basis.K
    per_coef = np.abs(s.loadings) ** 2 @ var if model.config.coefficient_axes != "canonical" \
        else var[:K] + var[K:]
    return np.diag(np.sqrt(per_coef))


def _se_rows(rows: np.ndarray, Qinv: np.ndarray, loadings: np.ndarray,
             sd: np.ndarray) -> np.ndarray:
    return np.linalg.norm((rows @ Qinv @ loadings) * sd, axis=-1)


def standard_error(model: ConditionalDensityModel, m: int, x, b, marginal: bool = False):
    """``v(b, x) = || q(b - beta(x))' Q^-1 Sigma(x) ||`` for split ``m``.

    ``b`` is a pair ``(b0, b1)`` for the joint density, or a slope value (or
    array of them) with ``marginal=True``, in which case the intercept
    direction of the basis is integrated out.
    """
    s = model.splits[m]
    sd = np.diag(sigma_matrix(model, m, x, coordinates=True))
    beta0, beta1 = model.beta(x)
    if marginal:
        rows = slope_basis_matrix(model.basis, np.asarray(b, float) - beta1)
    else:
        b = np.asarray(b, float)
        a0, a1 = b[..., 0] - beta0, b[..., 1] - beta1
        if model.config.mode == "orthogonal_w":
            a0 = a0 + a1 * s.g_at_test[model._locate(x)]
        rows = basis_matrix(model.basis, a0, a1)
    out = _se_rows(rows, s.Qinv.inverse, s.loadings, sd)
    return float(out) if np.ndim(out) == 0 else out


def lower_median(values, axis=0):
    v = np.sort(values, axis=axis)
    return np.take(v, (v.shape[axis] - 1) // 2, axis=axis)


def upper_median(values, axis=0):
    v = np.sort(values, axis=axis)
    return np.take(v, v.shape[axis] // 2, axis=axis)


def confidence_band(model: ConditionalDensityModel, x, b1_grid, alpha: float = 0.05) -> DensityBand:
    """Pointwise band for the slope density of ``B1`` given ``X = x``.

    With one split the band is ``f +- z_{1-alpha/2} v``.  With ``M > 1`` each
    split gives an interval at level ``1 - alpha/2`` and the band takes the
    lower median of the lower ends and the upper median of the upper ends.
    """
    if not 0 < alpha <= 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5], got {alpha}")
    b1 = np.asarray(b1_grid, float)
    point = slope_density_complex(model, x, b1).real
    if model.M == 1:
        se = standard_error(model, 0, x, b1, marginal=True)
        z = norm.ppf(1 - alpha / 2)
        return DensityBand(b1, point, point - z * se, point + z * se, alpha, 1, se)
    z = norm.ppf(1 - alpha / 4)
    lows, highs = [], []
    for m in range(model.M):
        f_m = slope_density_complex(model, x, b1, m=m).real
        se_m = standard_error(model, m, x, b1, marginal=True)
        lows.append(f_m - z * se_m)
        highs.append(f_m + z * se_m)
    return DensityBand(b1, point, lower_median(np.array(lows)), upper_median(np.array(highs)),
                       alpha, model.M, None)

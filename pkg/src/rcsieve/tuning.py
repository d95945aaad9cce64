"""Cross-validated choice of ``(K2, sigma_t)``.

The criterion is ``J = int f_hat^2 db - 2 int f_hat f db``.  The cross term
is not observable directly; it equals the W-average of
``E[V(Y - beta(x)'(1, W), W)' c | X = x, W = w]`` where ``c`` are the real
sieve coefficients of ``f_hat`` and ``V`` is the weighted transform of
:func:`rcsieve.transforms.v_operator`.  That conditional expectation is
learned by one scalar regression on the sample D of each split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from .forest import fit_regressor
from .pipeline import (ConditionalDensityModel, Dataset, SieveConfig, _seed, _w_averaged,
                       evaluate_density, fit_conditional_density)
from .transforms import default_t_rule, v_operator

MIN_KDE_OBS = 30


def kernel_density_w(w_samples):
    """Gaussian KDE with bandwidth ``1.06 sd n^(-1/5)``, floored at ``1e-6`` of its peak.

    The peak is read off a 512-point grid over the sample range.
    """
    w = np.asarray(w_samples, float).reshape(-1)
    if len(w) < MIN_KDE_OBS:
        raise ValueError(f"need at least {MIN_KDE_OBS} samples, got {len(w)}")
    if not np.std(w) > 0:
        raise ValueError("W sample has zero variance")
    kde = gaussian_kde(w, bw_method=1.06 * len(w) ** -0.2)
    floor = 1e-6 * float(np.max(kde(np.linspace(w.min(), w.max(), 512))))

    def f_w(points):
        pts = np.asarray(points, float)
        out = np.maximum(kde(pts.reshape(-1)), floor).reshape(pts.shape)
        return float(out) if out.ndim == 0 else out

    f_w.bandwidth = float(kde.factor * np.std(w, ddof=1))
    f_w.floor = floor
    return f_w


def squared_norm(model: ConditionalDensityModel, x, grid_step: float = 0.05,
                 half_width: float = 10.0) -> float:
    """``int f_hat(b | x)^2 db`` over the plane.

    In plain mode the basis is orthonormal and the value is the squared norm
    of the averaged real coefficients.  With orthogonalized W each split
    carries its own intercept shear, so a grid integral is used instead.
    """
    if model.config.mode == "plain":
        c = np.mean([model.coefficients(x, m) for m in range(model.M)], axis=0).real
        return float(c @ c)
    beta0, beta1 = model.beta(x)
    g = np.arange(-half_width, half_width + grid_step / 2, grid_step)
    vals = evaluate_density(model, x, g + beta0, g + beta1).values
    return float(np.trapezoid(np.trapezoid(vals ** 2, g, axis=1), g))


def cross_term(data: Dataset, model: ConditionalDensityModel, x, f_w=None, t_rule=None):
    """Estimate of ``int f_hat(b | x) f(b | x) db`` averaged over splits."""
    if f_w is None:
        f_w = kernel_density_w(data.W)
    t_rule = default_t_rule() if t_rule is None else t_rule
    beta0, beta1 = model.beta(x)
    i = model._locate(x)
    x = np.asarray(x, float).reshape(1, -1)
    y_shift = data.Y - beta0 - beta1 * data.W
    fw = f_w(data.W)
    params = model.config.forest
    total = 0.0
    for m, s in enumerate(model.splits):
        if len(s.D) == 0:
            raise ValueError("no observations left outside the coefficient sample; "
                             "use cross-fitting so every split keeps a sample D")
        g = s.g_at_test[i] if model.config.mode == "orthogonal_w" else 0.0
        c = model.coefficients(x[0], m).real
        D = s.D
        V = v_operator(model.basis, data.W[D] - g, y_shift[D], fw[D], t_rule)
        target = V @ c
        reg = fit_regressor(np.column_stack([data.X[D], data.W[D]]), target,
                            params.replace(seed=_seed(params.seed, 20, m)))
        mean, _ = _w_averaged(reg, x, data.W[s.R], False)
        total += float(mean[0])
    return total / model.M


def cv_criterion(data: Dataset, model: ConditionalDensityModel, x, f_w=None) -> float:
    """``J_hat = int f_hat^2 - 2 * cross_term`` at the model's ``(K2, sigma_t)``."""
    return squared_norm(model, x) - 2.0 * cross_term(data, model, x, f_w)


@dataclass
class TuningGrid:
    K2_values: list
    sigma_t_values: list
    criterion: np.ndarray = field(default=None)
    selected: tuple | None = None

    def __post_init__(self):
        if not self.K2_values or not self.sigma_t_values:
            raise ValueError("tuning grid must be nonempty")
        self.K2_values = sorted(int(k) for k in self.K2_values)
        self.sigma_t_values = sorted(float(s) for s in self.sigma_t_values)


def select_from_criterion(grid: TuningGrid, criterion) -> TuningGrid:
    """Fill ``grid`` with ``criterion`` and pick the argmin.

    Non-finite cells are never selected.  Ties go to the smaller K2, then the
    smaller sigma_t.
    """
    crit = np.asarray(criterion, float).reshape(len(grid.K2_values), len(grid.sigma_t_values))
    masked = np.where(np.isfinite(crit), crit, np.inf)
    if not np.isfinite(masked).any():
        raise ValueError("criterion is not finite on any grid cell")
    a, b = np.unravel_index(int(np.argmin(masked)), masked.shape)
    grid.criterion = crit
    grid.selected = (grid.K2_values[a], grid.sigma_t_values[b])
    return grid


def select_tuning(data: Dataset, grid: TuningGrid, x, config: SieveConfig | None = None,
                  return_models: bool = False):
    """Evaluate ``J_hat`` on every grid cell (K1 fixed) and select the minimizer."""
    config = config or SieveConfig()
    x = np.asarray(x, float).reshape(-1)
    f_w = kernel_density_w(data.W)
    crit = np.empty((len(grid.K2_values), len(grid.sigma_t_values)))
    models = {}
    for a, K2 in enumerate(grid.K2_values):
        for b, sigma_t in enumerate(grid.sigma_t_values):
            cfg = SieveConfig(**{**config.__dict__, "K2": K2, "sigma_t": sigma_t,
                                 "test_points": x[None, :]})
            model = fit_conditional_density(data, cfg)
            crit[a, b] = cv_criterion(data, model, x, f_w)
            if return_models:
                models[(K2, sigma_t)] = model
    out = select_from_criterion(grid, crit)
    return (out, models) if return_models else out


def joint_ise(model: ConditionalDensityModel, x, true_density, grid_step: float = 0.05,
              half_width: float = 8.0) -> float:
    """``int (f_hat - f)^2 db`` on a square grid centred at ``beta(x)``.

    ``true_density(b0, b1)`` takes broadcast arrays.
    """
    beta0, beta1 = model.beta(x)
    n = int(math.floor(2 * half_width / grid_step + 0.5)) + 1
    g = np.linspace(-half_width, half_width, n)
    g0, g1 = g + beta0, g + beta1
    est = evaluate_density(model, x, g0, g1).values
    truth = true_density(g0[:, None], g1[None, :])
    return float(np.trapezoid(np.trapezoid((est - truth) ** 2, g1, axis=1), g0))


__all__ = ["TuningGrid", "kernel_density_w", "cv_criterion", "cross_term", "squared_norm",
           "select_tuning", "select_from_criterion", "joint_ise"]

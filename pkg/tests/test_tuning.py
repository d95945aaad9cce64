import copy

import numpy as np
import pytest
from conftest import X0, quick
from scipy.stats import norm

from rcsieve.basis import HermiteBasis, basis_matrix
from rcsieve.forest import ForestParams
from rcsieve.pipeline import evaluate_density, fit_conditional_density
from rcsieve.simlab import DgpSpec, generate_dgp2, true_conditional_density
from rcsieve.tuning import (TuningGrid, cross_term, cv_criterion, joint_ise, kernel_density_w,
                            select_from_criterion, select_tuning, squared_norm)
from rcsieve.transforms import v_operator


def test_kde_standard_normal():
    w = np.random.default_rng(0).standard_normal(100_000)
    f = kernel_density_w(w)
    assert abs(f(0.0) - norm.pdf(0.0)) < 0.02
    assert f.bandwidth == pytest.approx(1.06 * np.std(w, ddof=1) * 1e5 ** -0.2, rel=1e-6)
    assert f(50.0) == f.floor > 0


def test_kde_input_checks():
    with pytest.raises(ValueError):
        kernel_density_w(np.zeros(10))
    with pytest.raises(ValueError):
        kernel_density_w(np.ones(100))


def test_grid_selection_rules():
    grid = select_from_criterion(TuningGrid([3], [1.0]), [[0.7]])
    assert grid.selected == (3, 1.0)
    grid = select_from_criterion(TuningGrid([7, 3, 5], [1.0]), [np.inf, 0.1, 0.5])
    assert grid.K2_values == [3, 5, 7]
    assert grid.selected == (5, 1.0)
    tie = select_from_criterion(TuningGrid([3, 5], [0.5, 1.0]), [[0.2, 0.2], [0.2, 0.1]])
    assert tie.selected == (5, 1.0)
    tie = select_from_criterion(TuningGrid([3, 5], [0.5, 1.0]), [[0.2, 0.2], [0.2, 0.2]])
    assert tie.selected == (3, 0.5)
    nan_cell = select_from_criterion(TuningGrid([3, 5], [1.0]), [np.nan, 3.0])
    assert nan_cell.selected == (5, 1.0)
    with pytest.raises(ValueError):
        select_from_criterion(TuningGrid([3], [1.0]), [np.inf])
    with pytest.raises(ValueError):
        TuningGrid([], [1.0])


def test_cross_term_oracle_gaussian():
    # B ~ N(mu, I) independent of W; the exact f_W is used
    rng = np.random.default_rng(1)
    n = 200_000
    mu = np.array([0.3, -0.4])
    W = 1.0 + 1.5 * rng.standard_normal(n)
    A0, A1 = rng.standard_normal(n), rng.standard_normal(n)
    Y = mu[0] + A0 + (mu[1] + A1) * W
    basis = HermiteBasis(3, 3)
    g = np.arange(-9, 9.0001, 0.05)
    G0, G1 = np.meshgrid(g, g, indexing="ij")
    truth = norm.pdf(G0) * norm.pdf(G1)
    rows = basis_matrix(basis, G0, G1)
    c = np.trapezoid(np.trapezoid(rows * truth[..., None], g, axis=1), g, axis=0)
    c = c + 0.05 * np.arange(basis.K) / basis.K          # move off the projection
    fhat = rows @ c
    ise = np.trapezoid(np.trapezoid((fhat - truth) ** 2, g, axis=1), g)
    f2 = np.trapezoid(np.trapezoid(truth ** 2, g, axis=1), g)
    V = np.concatenate([v_operator(basis, W[i:i + 20000], (Y - mu[0] - mu[1] * W)[i:i + 20000],
                                   norm.pdf(W[i:i + 20000], 1.0, 1.5))
                        for i in range(0, n, 20000)])
    J = c @ c - 2 * np.mean(V @ c)
    assert abs(J + f2 - ise) < 0.02


def test_squared_norm_matches_grid(dgp1_model):
    beta0, beta1 = dgp1_model.beta(X0)
    g = np.arange(-10, 10.0001, 0.05)
    vals = evaluate_density(dgp1_model, X0, g + beta0, g + beta1).values
    grid = np.trapezoid(np.trapezoid(vals ** 2, g, axis=1), g)
    assert squared_norm(dgp1_model, X0) == pytest.approx(grid, rel=1e-6)


def test_cross_term_requires_sample_d(dgp1_data):
    model = fit_conditional_density(dgp1_data, quick())
    broken = copy.deepcopy(model)
    broken.splits[0].D = np.array([], int)
    with pytest.raises(ValueError, match="cross-fitting"):
        cross_term(dgp1_data, broken, X0)


def test_criterion_finite_and_deterministic(dgp1_data):
    model = fit_conditional_density(dgp1_data, quick())
    f_w = kernel_density_w(dgp1_data.W)
    a = cv_criterion(dgp1_data, model, X0, f_w)
    b = cv_criterion(dgp1_data, model, X0, f_w)
    assert np.isfinite(a) and a == b


def test_select_tuning_small_grid(dgp1_data):
    cfg = quick(test_points=None)
    out, models = select_tuning(dgp1_data, TuningGrid([3, 5], [1.0]), X0, cfg, return_models=True)
    assert out.criterion.shape == (2, 1)
    assert out.selected in [(3, 1.0), (5, 1.0)]
    assert set(models) == {(3, 1.0), (5, 1.0)}


def test_joint_ise_of_itself_is_zero(dgp1_model):
    def own(b0, b1):
        return evaluate_density(dgp1_model, X0, np.ravel(b0), np.ravel(b1)).values

    assert joint_ise(dgp1_model, X0, own, grid_step=0.1) == pytest.approx(0.0, abs=1e-20)


@pytest.mark.slow
def test_dgp2_prefers_larger_k2():
    picks = []
    grid_b = np.linspace(-8, 8, 321)
    for rep in range(10):
        data = generate_dgp2(1000, seed=100 + rep)
        cfg = quick(test_points=None, seed=rep, forest=ForestParams(n_trees=1000, seed=rep))
        out = select_tuning(data, TuningGrid([3, 5, 7], [1.0]), X0, cfg)
        picks.append(out.selected[0])
    assert sum(k >= 5 for k in picks) > 5, picks

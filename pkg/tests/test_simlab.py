import math

import numpy as np
import pytest
from conftest import X0, quick
from scipy.stats import norm

from rcsieve.forest import ForestParams
from rcsieve.pipeline import SieveConfig, fit_conditional_density
from rcsieve.simlab import (ISE_GRID, DgpSpec, centred_characteristic, default_test_point,
                            generate, generate_dgp1, generate_dgp2, infeasible_ise, ise, rep_seeds,
                            run_monte_carlo, slope_center, slope_mean, true_conditional_density,
                            true_joint_density)
from rcsieve.tuning import joint_ise


def test_shapes_and_spec():
    data = generate(DgpSpec("dgp1", n=50, p=4, seed=3))
    assert (data.n, data.d) == (50, 4)
    with pytest.raises(ValueError):
        DgpSpec("dgp3")
    with pytest.raises(ValueError):
        DgpSpec("dgp1", p=2)
    np.testing.assert_array_equal(default_test_point(10), [0, 0.3] + [0] * 8)


def test_dgp1_moments():
    data, B0, B1, _ = generate_dgp1(1_000_000, p=3, seed=1, return_coefficients=True)
    assert abs(data.W.mean() - 1) < 0.01
    assert abs(B1.mean()) < 0.01
    np.testing.assert_allclose(data.Y, B0 + B1 * data.W)


def test_dgp2_strata():
    _, _, B1, _ = generate_dgp2(100_000, p=3, seed=2, fixed={1: -5.0}, return_coefficients=True)
    assert abs(B1.mean() - 1.5) < 0.02
    _, _, _, left = generate_dgp2(1_000_000, p=3, seed=3, fixed={1: 0.0}, return_coefficients=True)
    assert abs(left.mean() - 0.5) < 0.01
    _, _, _, left = generate_dgp2(1_000_000, p=3, seed=4, fixed={1: 0.3}, return_coefficients=True)
    assert abs(left.mean() - norm.cdf(0.3)) < 0.01
    assert norm.cdf(0.3) == pytest.approx(0.618, abs=1e-3)


def test_true_density_closed_form():
    f = true_conditional_density("dgp1", X0, [0.3])[0]
    want = 0.5 * norm.pdf(1.5) + 0.5 * norm.pdf(1.5 / math.sqrt(0.5)) / math.sqrt(0.5)
    assert f == pytest.approx(want, rel=1e-12)
    assert f == pytest.approx(0.0945, abs=1e-4)
    g = np.arange(-8, 8.0001, 0.05)
    for kind in ("dgp1", "dgp2"):
        assert np.trapezoid(true_conditional_density(kind, X0, g), g) == pytest.approx(1, abs=1e-6)
    vals = true_conditional_density("dgp1", X0, g)
    peaks = g[np.flatnonzero((vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])) + 1]
    np.testing.assert_allclose(peaks, [-1.2, 1.8], atol=0.1)
    d2 = true_conditional_density("dgp2", X0, [-1.2, 1.8])
    assert d2[0] > d2[1]


def test_joint_density_and_centering():
    f = true_joint_density("dgp1", X0)
    assert f(0.0, 0.3) == pytest.approx(norm.pdf(0) * true_conditional_density("dgp1", X0, [0.3])[0])
    assert slope_center(X0) == pytest.approx(0.3)
    assert slope_mean("dgp1", X0) == pytest.approx(0.3)
    assert slope_mean("dgp2", X0) == pytest.approx(norm.cdf(0.3) * -1.5 + norm.sf(0.3) * 1.5)
    phi = centred_characteristic("dgp2", X0)
    assert phi(0.0, 0.0) == pytest.approx(1.0)
    # centred: derivative of the cf at zero vanishes
    h = 1e-6
    assert abs((phi(0.0, h) - phi(0.0, -h)) / (2 * h)) < 1e-6


def test_infeasible_sieve_ordering():
    ise3 = infeasible_ise("dgp1", X0, 3, 3)
    ise5 = infeasible_ise("dgp1", X0, 3, 5)
    assert ise5 < ise3 < 0.05
    assert infeasible_ise("dgp2", X0, 3, 7) < infeasible_ise("dgp2", X0, 3, 3)


def test_ise_helper():
    g = np.linspace(0, 1, 101)
    assert ise(np.ones(101), np.zeros(101), g) == pytest.approx(1.0)


def test_rep_seeds_deterministic():
    assert rep_seeds(5, 3) == rep_seeds(5, 3)
    assert len(set(rep_seeds(5, 3))) == 3


def test_monte_carlo_determinism_and_sandwich():
    spec = DgpSpec("dgp1", n=300, p=4, seed=9)
    cfg = SieveConfig(forest=ForestParams(n_trees=60))
    x = default_test_point(4)
    a = run_monte_carlo(spec, cfg, reps=3, x=x)
    b = run_monte_carlo(spec, cfg, reps=3, x=x)
    np.testing.assert_array_equal(a.curves, b.curves)
    assert a.reps == 3 and not a.failures
    assert (a.q05_curve <= a.median_curve).all() and (a.median_curve <= a.q95_curve).all()
    np.testing.assert_array_equal(a.b1_grid, ISE_GRID)
    with pytest.raises(ValueError):
        run_monte_carlo(spec, cfg, reps=1)


def test_monte_carlo_records_failures():
    spec = DgpSpec("dgp1", n=60, p=4, seed=1)
    cfg = SieveConfig(K2=9, inference=True, forest=ForestParams(n_trees=60))
    with pytest.raises(RuntimeError, match="failed"):
        run_monte_carlo(spec, cfg, reps=2, x=default_test_point(4))


@pytest.mark.slow
def test_ise_decreases_with_n():
    med = {}
    cfg = SieveConfig(forest=ForestParams(n_trees=500))
    for n in (500, 2000):
        rep = run_monte_carlo(DgpSpec("dgp1", n=n, seed=n), cfg, reps=20)
        med[n] = np.median(rep.ise)
    assert med[2000] < med[500], med


@pytest.mark.slow
def test_infeasible_beats_feasible():
    truth = true_joint_density("dgp1", X0)
    feasible = []
    for rep in range(10):
        data = generate_dgp1(1000, seed=200 + rep)
        model = fit_conditional_density(data, quick(seed=rep, forest=ForestParams(seed=rep)))
        feasible.append(joint_ise(model, X0, truth))
    assert infeasible_ise("dgp1", X0, 3, 3) < np.median(feasible)

"""Two-stage sieve estimator of the conditional density of (B0, B1) given X.

Outline of :func:`fit_conditional_density`:

1. ``beta(x) = E[B | X = x]`` from four moment forests and ``Q`` on the
   full sample.
2. For each of ``M`` random half splits ``(D, R)``: fit ``m(x, w) = E[Y | X, W]``
   on ``D``, form ``T(W_i, Y_i - m(X_i, W_i))`` on ``R`` and regress the real
   and imaginary parts of each coefficient on ``(X, W)``.
3. ``Pi(x)`` averages the coefficient regressions over the empirical W.

The density at ``b`` is ``Re q(b - beta(x))' Q^-1 Pi(x)``, averaged over splits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import HermiteBasis, basis_matrix, slope_basis_matrix
from .forest import (ForestParams, HonestForest, UnsupportedOperation, fit_regressor,
                     little_bags_variance)
from .transforms import (QMatrix, WeightingMeasure, build_measure, q_inverse, q_matrix,
                         t_operator)

MIN_OBS = 50
SMALL_BLOCK = 100


class ConfigurationError(ValueError):
    """Raised when the requested configuration cannot be fitted on the data."""


@dataclass
class Dataset:
    """Observations ``(Y, W, X)``; ``folds`` optionally fixes the D/R split (0 = D)."""

    Y: np.ndarray
    W: np.ndarray
    X: np.ndarray
    folds: np.ndarray | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, float).reshape(-1)
        self.W = np.asarray(self.W, float).reshape(-1)
        X = np.asarray(self.X, float)
        self.X = X.reshape(-1, 1) if X.ndim == 1 else X
        n = len(self.Y)
        if len(self.W) != n or len(self.X) != n:
            raise ValueError("Y, W and X must have the same number of rows")
        if not (np.isfinite(self.Y).all() and np.isfinite(self.W).all()
                and np.isfinite(self.X).all()):
            raise ValueError("dataset contains missing or non-finite values")
        if self.folds is not None:
            self.folds = np.asarray(self.folds, int).reshape(-1)
            if len(self.folds) != n:
                raise ValueError("folds must have one label per observation")

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.Y[idx], self.W[idx], self.X[idx])


@dataclass
class SieveConfig:
    """Tuning and bookkeeping for :func:`fit_conditional_density`.

    Parameters
    ----------
    K1, K2 : int
        Hermite orders in the intercept and slope directions.
    sigma_t : float
        Scale of the lognormal weighting measure.
    M : int
        Number of cross-fitting splits.
    mode : {"plain", "orthogonal_w"}
        ``orthogonal_w`` replaces W by ``W - g(X)`` in the coefficient step.
    test_points : array, shape (n_test, d)
        Points ``x`` at which ``Pi(x)`` is computed and cached.
    inference : bool
        Split R into K disjoint blocks, one per coefficient, and record
        per-coefficient variances.
    holdout_w : bool
        Average over W of sample D instead of the full sample.
    clip : bool
        Clip negative density values and renormalize on the evaluation grid.
    keep_forests : bool
        Keep the coefficient regressions so new test points can be evaluated.
    coefficient_axes : {"decorrelated", "canonical"}
        Real coordinates handed to the 2K regressions.  ``canonical`` uses the
        real and imaginary part of each ``T_k``.  ``decorrelated`` uses the
        principal axes of the stacked ``(Re T, Im T)`` targets on R and maps
        the predictions back; separate regressions then keep the cancellations
        that small-eigenvalue directions of Q rely on.
    """

    K1: int = 3
    K2: int = 3
    sigma_t: float = 1.0
    M: int = 1
    mode: str = "plain"
    test_points: np.ndarray | None = None
    forest: ForestParams = field(default_factory=ForestParams)
    inference: bool = False
    holdout_w: bool = False
    clip: bool = False
    keep_forests: bool = False
    n_nodes: int = 64
    seed: int = 0
    coefficient_axes: str = "decorrelated"

    def __post_init__(self):
        if self.mode not in ("plain", "orthogonal_w"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.coefficient_axes not in ("decorrelated", "canonical"):
            raise ConfigurationError(f"unknown coefficient_axes {self.coefficient_axes!r}")
        if self.M < 1:
            raise ConfigurationError("M must be at least 1")
        if self.K1 < 1 or self.K2 < 1:
            raise ConfigurationError("K1 and K2 must be positive")
        if not self.sigma_t > 0:
            raise ConfigurationError("sigma_t must be positive")


def _seed(base: int, *keys: int) -> int:
    """Deterministic child seed for a named sub-task."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


@dataclass
class BetaModel:
    """``beta(x) = E[B | X = x]`` as a local moment ratio.

    ``moments`` predicts ``(E[Y|x], E[W|x], E[YW|x], E[W^2|x])``.  With the
    shared honest forest all four use the same weights, so the slope is a
    locally weighted covariance over a locally weighted variance.
    """

    moments: object
    eps: float

    def predict(self, x):
        """Return ``(beta0, beta1, guarded)`` arrays for the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, float))
        mom = np.asarray(self.moments.predict(x)).reshape(len(x), 4)
        my, mw, myw, mww = mom.T
        var = mww - mw ** 2
        guarded = var < self.eps
        beta1 = (myw - my * mw) / np.maximum(var, self.eps)
        return my - beta1 * mw, beta1, guarded

    def beta0(self, x):
        return self.predict(x)[0]

    def beta1(self, x):
        return self.predict(x)[1]

    def importance(self) -> np.ndarray:
        return self.moments.split_importance()


@dataclass
class _SeparateMoments:
    """Four independent regressions; used with regressors lacking shared leaves."""

    fits: list

    def predict(self, x):
        return np.column_stack([np.atleast_1d(f.predict(x)) for f in self.fits])

    def split_importance(self):
        return np.mean([f.split_importance() for f in self.fits], axis=0)


def estimate_beta(data: Dataset, params: ForestParams = ForestParams()) -> BetaModel:
    """Local moment ratio from ``E[Y|X]``, ``E[W|X]``, ``E[YW|X]``, ``E[W^2|X]``.

    Fitted on the full sample.  The honest forest grows one set of trees,
    split on the centred cross moment ``(W - mean W)(Y - mean Y)``, whose
    leaves carry all four moments.  The kNN baseline fits them separately.
    """
    Y, W, X = data.Y, data.W, data.X
    eps = 1e-6 * float(np.var(W))
    if eps <= 0:
        raise ValueError("W has zero variance; the slope is not identified")
    moments = np.column_stack([Y, W, Y * W, W * W])
    p = params.replace(seed=_seed(params.seed, 1))
    if params.kind == "honest_forest":
        split_target = (W - W.mean()) * (Y - Y.mean())
        model = fit_regressor(X, split_target, p, leaf_targets=moments)
    else:
        model = _SeparateMoments([fit_regressor(X, moments[:, j], p) for j in range(4)])
    return BetaModel(model, eps=eps)


@dataclass
class SplitRecord:
    """Artifacts of one cross-fitting split.

    ``loadings`` (K x 2K, complex) maps the 2K real regression coordinates
    to the complex coefficients; ``variance`` holds one variance per
    coordinate and test point.
    """

    D: np.ndarray
    R: np.ndarray
    pi: np.ndarray
    variance: np.ndarray | None
    Qinv: QMatrix
    g_at_test: np.ndarray
    loadings: np.ndarray
    blocks: list | None = None
    importance: np.ndarray | None = None
    outcome_model: object = None
    w_model: object = None
    forests: list | None = None
    w_values: np.ndarray | None = None


@dataclass
class ConditionalDensityModel:
    config: SieveConfig
    basis: HermiteBasis
    measure: WeightingMeasure
    Qinv: QMatrix
    beta_model: BetaModel
    splits: list
    test_points: np.ndarray
    beta_at_test: np.ndarray
    guard_at_test: np.ndarray
    n: int
    d: int

    @property
    def M(self) -> int:
        return len(self.splits)

    def _locate(self, x) -> int:
        x = np.asarray(x, float).reshape(-1)
        if len(x) != self.d:
            raise ValueError(f"expected {self.d} covariates, got {len(x)}")
        hits = np.flatnonzero(np.all(np.abs(self.test_points - x) <= 1e-12, axis=1))
        if len(hits) == 0:
            raise KeyError("x is not a configured test point; refit with it in "
                           "test_points or with keep_forests=True and use add_test_point")
        return int(hits[0])

    def coefficients(self, x, m: int) -> np.ndarray:
        """``Q^-1 Pi_m(x)`` for split ``m``; complex, length K."""
        i = self._locate(x)
        s = self.splits[m]
        return s.Qinv.inverse @ s.pi[i]

    def beta(self, x) -> tuple[float, float]:
        i = self._locate(x)
        return float(self.beta_at_test[i, 0]), float(self.beta_at_test[i, 1])

    def add_test_point(self, x) -> None:
        """Compute and cache ``Pi_m(x)`` for a new point (needs kept forests)."""
        x = np.asarray(x, float).reshape(1, -1)
        if any(s.forests is None for s in self.splits):
            raise UnsupportedOperation("coefficient regressions were not kept")
        for s in self.splits:
            g = s.w_model.predict(x) if s.w_model is not None else np.zeros(1)
            pi, var = _coefficient_predictions(s.forests, x, s.w_values, s.loadings,
                                               s.blocks is not None)
            s.pi = np.vstack([s.pi, pi])
            s.g_at_test = np.concatenate([s.g_at_test, np.atleast_1d(g)])
            if s.variance is not None:
                s.variance = np.vstack([s.variance, var])
        b0, b1, guard = self.beta_model.predict(x)
        self.test_points = np.vstack([self.test_points, x])
        self.beta_at_test = np.vstack([self.beta_at_test, np.column_stack([b0, b1])])
        self.guard_at_test = np.concatenate([self.guard_at_test, guard])


def _w_averaged(model, x, w_values, with_variance: bool):
    """Mean over ``w`` in ``w_values`` of ``model(x, w)``; W is the last column."""
    n_test = len(x)
    xq = np.column_stack([x, np.zeros(n_test)])
    if isinstance(model, HonestForest):
        per_tree = model.tree_predictions_w_averaged(xq, xq.shape[1] - 1, w_values)
        mean = per_tree.mean(axis=1)
        var = little_bags_variance(per_tree) if with_variance else None
        return mean, var
    if with_variance:
        raise UnsupportedOperation(f"{model.kind} does not provide variances")
    grid = np.repeat(xq, len(w_values), axis=0)
    grid[:, -1] = np.tile(w_values, n_test)
    return np.asarray(model.predict(grid)).reshape(n_test, len(w_values)).mean(axis=1), None


def _coefficient_predictions(forests, x, w_values, loadings, with_variance):
    z = np.zeros((len(x), len(forests)))
    var = np.zeros_like(z) if with_variance else None
    for j, f in enumerate(forests):
        z[:, j], v = _w_averaged(f, x, w_values, with_variance)
        if with_variance:
            var[:, j] = v
    return z @ loadings.T, var


def regression_axes(targets: np.ndarray, kind: str):
    """Orthogonal ``U`` (2K x 2K) and loadings ``A`` with ``T = A (S U)`` row-wise.

    ``S = [Re T, Im T]``.  ``canonical`` gives ``U = I``.  ``decorrelated``
    takes eigenvectors of the sample covariance of ``S`` in decreasing order,
    each signed so its largest entry is positive.
    """
    K = targets.shape[1]
    if kind == "canonical":
        U = np.eye(2 * K)
    else:
        S = np.column_stack([targets.real, targets.imag])
        vals, U = np.linalg.eigh(np.cov(S, rowvar=False))
        U = U[:, ::-1]
        lead = U[np.argmax(np.abs(U), axis=0), np.arange(2 * K)]
        U = U * np.where(lead < 0, -1.0, 1.0)
    return U, U[:K] + 1j * U[K:]


def _split_indices(data: Dataset, config: SieveConfig, m: int):
    if data.folds is not None and config.M == 1:
        D, R = np.flatnonzero(data.folds == 0), np.flatnonzero(data.folds != 0)
    else:
        perm = np.random.default_rng(_seed(config.seed, 13, m)).permutation(data.n)
        D, R = np.sort(perm[:data.n // 2]), np.sort(perm[data.n // 2:])
    if len(D) == 0 or len(R) == 0:
        raise ConfigurationError("both halves of the sample split must be nonempty")
    return D, R


def _blocks(R: np.ndarray, K: int, min_leaf: int, seed: int) -> list:
    size = len(R) // K
    if size < 2 * min_leaf:
        need = 2 * K * 2 * min_leaf
        raise ConfigurationError(
            f"inference needs |R|/K >= {2 * min_leaf} observations per coefficient; "
            f"K={K} requires n >= {need}, got |R|={len(R)}")
    if size < SMALL_BLOCK:
        warnings.warn(f"per-coefficient block size {size} < {SMALL_BLOCK}; variances "
                      "and intervals will be unreliable", RuntimeWarning, stacklevel=3)
    perm = np.random.default_rng(seed).permutation(R)
    return [np.sort(perm[k * size:(k + 1) * size]) for k in range(K)]


def _fit_split(data, config, basis, measure, Qinv_full, test_points, m):
    params = config.forest
    K = basis.K
    X, W, Y = data.X, data.W, data.Y
    D, R = _split_indices(data, config, m)

    XW = np.column_stack([X, W])
    m_hat = fit_regressor(XW[D], Y[D], params.replace(seed=_seed(params.seed, 10, m)))
    resid = Y[R] - np.atleast_1d(m_hat.predict(XW[R]))

    g_hat = None
    g_test = np.zeros(len(test_points))
    w_tilde = W
    Qinv = Qinv_full
    if config.mode == "orthogonal_w":
        g_hat = fit_regressor(X[D], W[D], params.replace(seed=_seed(params.seed, 11, m)))
        w_tilde = W - np.atleast_1d(g_hat.predict(X))
        Qinv = q_inverse(q_matrix(basis, measure, w_tilde[R]))
        g_test = np.atleast_1d(g_hat.predict(test_points))

    targets = t_operator(basis, measure, w_tilde[R], resid)
    U, loadings = regression_axes(targets, config.coefficient_axes)
    coords = np.column_stack([targets.real, targets.imag]) @ U
    blocks = None
    if config.inference:
        blocks = _blocks(R, K, params.min_leaf, _seed(config.seed, 14, m))
        pos = {r: i for i, r in enumerate(R)}

    features = np.column_stack([X, w_tilde])
    forests = []
    for j in range(2 * K):
        # coordinates j and j + K share block j mod K
        rows = np.arange(len(R)) if blocks is None else np.array([pos[r] for r in blocks[j % K]])
        seed = _seed(params.seed, 12, m, j)
        forests.append(fit_regressor(features[R[rows]], coords[rows, j],
                                     params.replace(seed=seed)))

    w_values = w_tilde[D] if config.holdout_w else w_tilde
    pi, var = _coefficient_predictions(forests, test_points, w_values, loadings,
                                       config.inference)
    importance = None
    if isinstance(forests[0], HonestForest):
        importance = np.array([f.split_importance() for f in forests])
    return SplitRecord(D=D, R=R, pi=pi, variance=var, Qinv=Qinv, g_at_test=g_test,
                       loadings=loadings, blocks=blocks, importance=importance, outcome_model=m_hat,
                       w_model=g_hat, forests=forests if config.keep_forests else None,
                       w_values=w_values if config.keep_forests else None)


def fit_conditional_density(data: Dataset, config: SieveConfig) -> ConditionalDensityModel:
    """Fit the cross-fitted sieve estimator and cache ``Pi_m(x)`` at the test points."""
    if data.n < MIN_OBS:
        raise ConfigurationError(f"need at least {MIN_OBS} observations, got {data.n}")
    if config.test_points is None:
        raise ConfigurationError("test_points must be supplied")
    test_points = np.atleast_2d(np.asarray(config.test_points, float))
    if test_points.shape[1] != data.d:
        raise ConfigurationError(f"test points have {test_points.shape[1]} columns, "
                                 f"data has {data.d}")
    basis = HermiteBasis(config.K1, config.K2)
    measure = build_measure(config.sigma_t, config.n_nodes)

    beta_model = estimate_beta(data, config.forest)
    b0, b1, guard = beta_model.predict(test_points)
    if guard.any():
        warnings.warn("variance guard for W given X triggered at "
                      f"{int(guard.sum())} test point(s)", RuntimeWarning, stacklevel=2)
    Qinv = q_inverse(q_matrix(basis, measure, data.W))

    splits = [_fit_split(data, config, basis, measure, Qinv, test_points, m)
              for m in range(config.M)]
    return ConditionalDensityModel(config=config, basis=basis, measure=measure, Qinv=Qinv,
                                   beta_model=beta_model, splits=splits,
                                   test_points=test_points,
                                   beta_at_test=np.column_stack([b0, b1]),
                                   guard_at_test=guard, n=data.n, d=data.d)


@dataclass
class DensityGrid:
    """Density values with the max|Im| / max|Re| diagnostic."""

    values: np.ndarray
    imag_ratio: float
    grids: tuple = ()


def _imag_ratio(z: np.ndarray) -> float:
    top = np.max(np.abs(z.real)) if z.size else 0.0
    return float(np.max(np.abs(z.imag)) / top) if top > 0 else 0.0


def _clip_normalize(values: np.ndarray, *grids) -> np.ndarray:
    out = np.clip(values, 0.0, None)
    mass = out
    for axis_grid in reversed(grids):
        mass = np.trapezoid(mass, axis_grid, axis=-1)
    return out / mass if mass > 0 else out


def joint_density_complex(model: ConditionalDensityModel, x, b0_grid, b1_grid) -> np.ndarray:
    """Split average of ``q(b - beta(x))' Q^-1 Pi_m(x)`` before taking real parts."""
    b0 = np.asarray(b0_grid, float)
    b1 = np.asarray(b1_grid, float)
    beta0, beta1 = model.beta(x)
    i = model._locate(x)
    B0, B1 = np.meshgrid(b0 - beta0, b1 - beta1, indexing="ij")
    out = np.zeros(B0.shape, complex)
    for m, s in enumerate(model.splits):
        # orthogonalized W shears the intercept: A0' = A0 + A1 g(x)
        shear = B0 + B1 * s.g_at_test[i] if model.config.mode == "orthogonal_w" else B0
        out += basis_matrix(model.basis, shear, B1) @ model.coefficients(x, m)
    return out / model.M


def evaluate_density(model: ConditionalDensityModel, x, b0_grid, b1_grid) -> DensityGrid:
    """Joint density on ``b0_grid x b1_grid`` (rows follow ``b0_grid``)."""
    z = joint_density_complex(model, x, b0_grid, b1_grid)
    values = z.real
    if model.config.clip:
        values = _clip_normalize(values, np.asarray(b0_grid, float), np.asarray(b1_grid, float))
    return DensityGrid(values, _imag_ratio(z), (np.asarray(b0_grid), np.asarray(b1_grid)))


def slope_density_complex(model: ConditionalDensityModel, x, b1_grid, m: int | None = None):
    """Slope marginal ``int f(b0, b1 | x) db0`` in closed form; complex."""
    b1 = np.asarray(b1_grid, float)
    _, beta1 = model.beta(x)
    S = slope_basis_matrix(model.basis, b1 - beta1)
    ms = range(model.M) if m is None else [m]
    return np.mean([S @ model.coefficients(x, j) for j in ms], axis=0)


def slope_density(model: ConditionalDensityModel, x, b1_grid) -> DensityGrid:
    """Density of ``B1`` given ``X = x`` on ``b1_grid``."""
    z = slope_density_complex(model, x, b1_grid)
    values = z.real
    if model.config.clip:
        values = _clip_normalize(values, np.asarray(b1_grid, float))
    return DensityGrid(values, _imag_ratio(z), (np.asarray(b1_grid),))


def marginal_density(data: Dataset, config: SieveConfig, b1_grid, return_curves: bool = False):
    """Unconditional slope density by averaging out-of-fold conditional estimates.

    Observation ``i`` is evaluated with the splits whose coefficient sample R
    excludes ``i``.  With ``M = 1`` half of the sample has no such split and
    uses the in-fold estimate; a warning is issued.
    """
    if config.M == 1:
        warnings.warn("marginal density with M=1: out-of-fold averaging is degenerate",
                      RuntimeWarning, stacklevel=2)
    cfg = SieveConfig(**{**config.__dict__, "test_points": data.X, "inference": False})
    model = fit_conditional_density(data, cfg)
    b1 = np.asarray(b1_grid, float)
    basis = model.basis
    curves = np.empty((data.n, len(b1)))
    in_R = np.zeros((model.M, data.n), bool)
    for m, s in enumerate(model.splits):
        in_R[m, s.R] = True
    for i in range(data.n):
        use = np.flatnonzero(~in_R[:, i])
        if len(use) == 0:
            use = np.arange(model.M)
        S = slope_basis_matrix(basis, b1 - model.beta_at_test[i, 1])
        coefs = np.mean([model.splits[m].Qinv.inverse @ model.splits[m].pi[i] for m in use],
                        axis=0)
        curves[i] = (S @ coefs).real
    out = curves.mean(axis=0)
    return (out, curves) if return_curves else out


def variable_importance(model: ConditionalDensityModel):
    """Return ``(VI_shape, VI_mean)``, each a length-d vector summing to one.

    VI_shape averages the split importance of all coefficient regressions
    over splits, with the W column removed and the rest renormalized.
    VI_mean averages the four moment regressions behind ``beta``.
    """
    if any(s.importance is None for s in model.splits):
        raise UnsupportedOperation("variable importance needs forest regressors")
    coef = np.mean([s.importance for s in model.splits], axis=(0, 1))[:model.d]
    total = coef.sum()
    shape = coef / total if total > 0 else np.full(model.d, 1.0 / model.d)
    mean = model.beta_model.importance()
    return shape, mean / mean.sum()

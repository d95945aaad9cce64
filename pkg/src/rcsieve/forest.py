"""Regressors for the sieve coefficients: an honest subsampled forest and a kNN baseline.

The forest grows trees in groups of two that share a half-sample, which is
what the little-bags variance estimate needs.  Inside a tree the subsample
is split into a structure half, used to choose splits, and an estimation
half, used only for the leaf means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _trees

GROUP_SIZE = 2
IMPORTANCE_DECAY = 0.8


class UnsupportedOperation(TypeError):
    """The regressor kind does not provide the requested quantity."""


@dataclass(frozen=True)
class ForestParams:
    kind: str = "honest_forest"
    n_trees: int = 2000
    subsample_fraction: float = 0.5
    min_leaf: int = 5
    honesty: bool = True
    mtry: int | None = None
    seed: int = 0
    knn_k: int = 10

    def __post_init__(self):
        if self.kind not in ("honest_forest", "knn_baseline"):
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if not 0 < self.subsample_fraction < 1:
            raise ValueError("subsample_fraction must lie in (0, 1)")
        if self.n_trees < 1 or self.min_leaf < 1:
            raise ValueError("n_trees and min_leaf must be positive")

    def replace(self, **kw) -> "ForestParams":
        return ForestParams(**{**self.__dict__, **kw})


def default_mtry(d: int) -> int:
    return min(math.ceil(math.sqrt(d) + 20), d)


@dataclass
class HonestForest:
    """Fitted honest forest.  Immutable after :func:`fit_regressor`."""

    params: ForestParams
    feature_dim: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: np.ndarray
    offsets: np.ndarray
    importance: np.ndarray
    samples: tuple | None = field(default=None, repr=False)

    kind = "honest_forest"

    @property
    def n_outputs(self) -> int:
        return self.value.shape[1]

    def _squeeze(self, out):
        return out[..., 0] if self.n_outputs == 1 else out

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    def _arrays(self):
        return self.feature, self.threshold, self.left, self.right, self.value, self.offsets

    def _query(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        xq = np.atleast_2d(x)
        if xq.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {xq.shape[1]}")
        return np.ascontiguousarray(xq)

    def tree_predictions(self, x) -> np.ndarray:
        """Per-tree predictions, shape ``(n_points, n_trees)`` (``+ (q,)`` if multi-output)."""
        return self._squeeze(_trees.predict_trees(*self._arrays(), self._query(x)))

    def tree_predictions_w_averaged(self, x, w_col: int, w_values) -> np.ndarray:
        """Per-tree ``mean_r tree(x, w=W_r)`` with column ``w_col`` swept over ``w_values``."""
        w_sorted = np.sort(np.asarray(w_values, float))
        out = _trees.predict_trees_w_averaged(*self._arrays(), self._query(x), int(w_col),
                                              w_sorted)
        return self._squeeze(out)

    def predict(self, x):
        out = self.tree_predictions(x).mean(axis=1)
        if np.ndim(x) == 1:
            return float(out[0]) if self.n_outputs == 1 else out[0]
        return out

    def predict_variance(self, x):
        if self.n_outputs != 1:
            raise UnsupportedOperation("variance is only provided for single-output forests")
        out = little_bags_variance(self.tree_predictions(x))
        return float(out[0]) if np.ndim(x) == 1 else out

    def split_importance(self) -> np.ndarray:
        return self.importance.copy()


@dataclass
class KNNRegressor:
    """k-nearest-neighbour mean; a transparent baseline for oracle tests."""

    params: ForestParams
    feature_dim: int
    X: np.ndarray
    y: np.ndarray
    tree: cKDTree = field(repr=False)

    kind = "knn_baseline"

    def _neighbours(self, x):
        xq = np.atleast_2d(np.asarray(x, float))
        if xq.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {xq.shape[1]}")
        k = min(self.params.knn_k, len(self.y))
        _, idx = self.tree.query(xq, k=k)
        return np.asarray(idx).reshape(len(xq), k)

    def predict(self, x):
        out = self.y[self._neighbours(x)].mean(axis=1)
        return float(out[0]) if np.ndim(x) == 1 else out

    def predict_variance(self, x):
        nb = self.y[self._neighbours(x)]
        k = nb.shape[1]
        out = nb.var(axis=1, ddof=1) / k if k > 1 else np.zeros(len(nb))
        return float(out[0]) if np.ndim(x) == 1 else out

    def split_importance(self):
        raise UnsupportedOperation("kNN baseline has no split importance")


def little_bags_variance(per_tree: np.ndarray, group_size: int = GROUP_SIZE) -> np.ndarray:
    """Half-sample (little bags) variance of the forest average.

    ``per_tree`` has shape ``(n_points, n_trees)`` with consecutive trees
    forming groups.  Between-group variance of group means is corrected by the
    Monte Carlo noise of each group mean and floored at zero.
    """
    per_tree = np.atleast_2d(per_tree)
    n_trees = per_tree.shape[1]
    n_groups = n_trees // group_size
    if n_trees < 50 or n_groups < 2 or n_trees % group_size:
        raise ValueError(f"variance needs >= 50 trees in complete groups of {group_size}, "
                         f"got {n_trees}")
    grouped = per_tree.reshape(per_tree.shape[0], n_groups, group_size)
    group_mean = grouped.mean(axis=2)
    centre = group_mean.mean(axis=1, keepdims=True)
    var_between = ((group_mean - centre) ** 2).mean(axis=1)
    var_total = ((grouped - centre[..., None]) ** 2).mean(axis=(1, 2))
    group_noise = (var_total - var_between) / (group_size - 1)
    return np.maximum(var_between - group_noise, 0.0)


def fit_regressor(X, y, params: ForestParams = ForestParams(), keep_samples: bool = False,
                  leaf_targets=None):
    """Fit the regressor described by ``params`` on ``(X, y)``.

    With ``leaf_targets`` (shape ``(n, q)``) the trees still split on ``y``
    but every leaf stores the means of the ``q`` columns, so all outputs
    share the same forest weights.
    """
    X = np.ascontiguousarray(np.asarray(X, float))
    y = np.ascontiguousarray(np.asarray(y, float))
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) and match len(y)")
    yl = y[:, None] if leaf_targets is None else np.asarray(leaf_targets, float)
    yl = np.ascontiguousarray(yl.reshape(len(y), -1))
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y)) and np.all(np.isfinite(yl))):
        raise ValueError("missing or non-finite values in regression inputs")
    n, d = X.shape
    if n < 2 * params.min_leaf:
        raise ValueError(f"need at least {2 * params.min_leaf} observations, got {n}")
    if params.kind == "knn_baseline":
        if leaf_targets is not None:
            raise UnsupportedOperation("kNN baseline takes a single target")
        return KNNRegressor(params, d, X, y, cKDTree(X))

    n_trees = params.n_trees
    n_groups = -(-n_trees // GROUP_SIZE)
    half = max(n // 2, 2)
    sub = min(max(math.ceil(params.subsample_fraction * n), 2), half)
    mtry = params.mtry or default_mtry(d)
    mtry = min(mtry, d)
    ss = np.random.SeedSequence(params.seed)
    seeds = ss.generate_state(n_groups + n_trees).astype(np.int64)
    group_seeds = seeds[:n_groups]
    tree_seeds = seeds[n_groups:]
    raw = _trees.grow_forest(X, y, yl, group_seeds, tree_seeds, GROUP_SIZE, half, sub,
                             params.min_leaf, mtry, params.honesty)
    feature, threshold, left, right, value, depth, counts, cap, struct_sets, est_sets = raw
    arrays = _trees.compact(feature, threshold, left, right, value, depth, counts, cap)
    f2, t2, l2, r2, v2, d2, offsets = arrays
    weights = _trees.split_weights(f2, d2, d, IMPORTANCE_DECAY)
    total = weights.sum()
    importance = weights / total if total > 0 else np.full(d, 1.0 / d)
    samples = (struct_sets, est_sets if params.honesty else None) if keep_samples else None
    return HonestForest(params, d, f2, t2, l2, r2, v2, d2, offsets, importance, samples)


def predict(model, x):
    return model.predict(x)


def predict_variance(model, x):
    return model.predict_variance(x)


def split_importance(model) -> np.ndarray:
    return model.split_importance()

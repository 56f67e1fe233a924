"""Regression heads from image features (or scalar nightlights) to wealth.

Two heads: closed-form ridge regression on standardized features, and
least-squares gradient-boosted regression trees.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .errors import LengthMismatch, SingularSystem, ValidationError

log = logging.getLogger(__name__)

RIDGE_LAMBDA_GRID = tuple(10.0 ** k for k in range(-3, 4))
RIDGE_CV_FOLDS = 5


@dataclass
class DesignMatrix:
    """Rows of features with AWI targets and country groups.

    ``ids``, ``locations`` and ``nightlights`` are optional side columns used
    by the evaluation protocols.
    """

    rows: np.ndarray
    targets: np.ndarray
    groups: np.ndarray
    ids: np.ndarray | None = None
    locations: np.ndarray | None = None
    nightlights: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.groups = np.asarray(self.groups)
        n = len(self.rows)
        if n < 2:
            raise ValidationError("a design matrix needs at least 2 rows")
        if self.targets.shape != (n,) or self.groups.shape != (n,):
            raise LengthMismatch("rows, targets and groups must have equal length")
        if not (np.isfinite(self.rows).all() and np.isfinite(self.targets).all()):
            raise ValidationError("design matrix contains non-finite values")
        if self.ids is None:
            self.ids = np.array([str(i) for i in range(n)])
        for name in ("ids", "locations", "nightlights"):
            col = getattr(self, name)
            if col is not None:
                col = np.asarray(col)
                if len(col) != n:
                    raise LengthMismatch(f"{name} has {len(col)} entries for {n} rows")
                setattr(self, name, col)

    def __len__(self):
        return len(self.rows)

    def subset(self, mask_or_idx) -> "DesignMatrix":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return DesignMatrix(self.rows[idx], self.targets[idx], self.groups[idx], self.ids[idx],
                            pick(self.locations), pick(self.nightlights))

    def with_rows(self, rows) -> "DesignMatrix":
        return DesignMatrix(rows, self.targets, self.groups, self.ids, self.locations, self.nightlights)


def _as_2d(X):
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


# ridge ------------------------------------------------------------------

@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float
    feature_means: np.ndarray
    feature_scales: np.ndarray

    @property
    def raw_weights(self) -> np.ndarray:
        """Coefficients on the unstandardized feature scale."""
        return self.weights / self.feature_scales

    @property
    def raw_intercept(self) -> float:
        return float(self.intercept - self.raw_weights @ self.feature_means)

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        if X.shape[1] != len(self.weights):
            raise LengthMismatch(f"model has {len(self.weights)} features, input has {X.shape[1]}")
        return self.intercept + ((X - self.feature_means) / self.feature_scales) @ self.weights

    def to_dict(self):
        return {"head": "ridge", "lambda": self.lam, "intercept": self.intercept,
                "weights": self.weights.tolist(), "feature_means": self.feature_means.tolist(),
                "feature_scales": self.feature_scales.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"], dtype=np.float64), d["intercept"], d["lambda"],
                   np.array(d["feature_means"], dtype=np.float64), np.array(d["feature_scales"], dtype=np.float64))


def standardize_stats(X) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def ridge_objective(Z, y, w, b, lam) -> float:
    r = y - Z @ w - b
    return float(r @ r + lam * (w @ w))


def ridge_fit(X, y, lam: float) -> RidgeModel:
    """Minimize ``|y - Zw - b|^2 + lam |w|^2`` on standardized features ``Z``.

    The intercept is left unpenalized by centring the targets. Rows are put
    in a canonical order first, so the fit does not depend on row order.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=np.float64)
    if len(X) < 2 or len(y) != len(X):
        raise LengthMismatch("ridge needs n >= 2 rows with one target each")
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]
    if lam < 0 or not math.isfinite(lam):
        raise ValidationError(f"lambda must be a finite non-negative number, got {lam}")
    mean, scale = standardize_stats(X)
    Z = (X - mean) / scale
    ybar = float(y.mean())
    gram = Z.T @ Z
    if lam == 0 and np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise SingularSystem("lambda = 0 with a rank-deficient design; add regularization")
    gram[np.diag_indices_from(gram)] += lam
    try:
        w = np.linalg.solve(gram, Z.T @ (y - ybar))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    return RidgeModel(w, ybar, float(lam), mean, scale)


def ridge_predict(model: RidgeModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.weights.shape:
        raise LengthMismatch(f"expected {len(model.weights)} features, got {x.shape}")
    return float(model.predict(x[None])[0])


def kfold_indices(n: int, k: int, seed) -> list[np.ndarray]:
    """Seeded shuffled partition of ``range(n)`` into ``k`` folds."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def ridge_fit_cv(X, y, lambdas: Sequence[float] = RIDGE_LAMBDA_GRID, folds: int = RIDGE_CV_FOLDS,
                 seed=0) -> RidgeModel:
    """Pick lambda by k-fold CV mean squared error on the given rows only, then refit."""
    X = _as_2d(X)
    y = np.asarray(y, dtype=np.float64)
    k = min(folds, len(X))
    if k < 2:
        return ridge_fit(X, y, max(lambdas))
    parts = kfold_indices(len(X), k, seed)
    scores = []
    for lam in lambdas:
        sse = 0.0
        for part in parts:
            train = np.ones(len(X), bool)
            train[part] = False
            if train.sum() < 2:
                continue
            m = ridge_fit(X[train], y[train], lam) if lam > 0 else _try_fit(X[train], y[train], lam)
            if m is None:
                sse = math.inf
                break
            sse += float(((m.predict(X[part]) - y[part]) ** 2).sum())
        scores.append(sse)
    best = float(lambdas[int(np.argmin(scores))])
    return ridge_fit(X, y, best)


def _try_fit(X, y, lam):
    try:
        return ridge_fit(X, y, lam)
    except SingularSystem:
        return None


# gradient-boosted trees -------------------------------------------------

@dataclass
class RegressionTree:
    """Flat preorder arrays; ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        feature = np.array(self.feature)
        threshold = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        active = feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            go_left = X[rows, feature[nd]] <= threshold[nd]
            node[rows] = np.where(go_left, left[nd], right[nd])
            active = feature[node] >= 0
        return np.array(self.value)[node]

    def leaves(self) -> list[float]:
        return [v for f, v in zip(self.feature, self.value) if f < 0]

    def to_dict(self):
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["feature"]), list(d["threshold"]), list(d["left"]), list(d["right"]), list(d["value"]))


@dataclass(frozen=True)
class GBTParams:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1")
        if not 0 < self.learning_rate:
            raise ValidationError("learning_rate must be positive")
        if self.min_leaf < 1:
            raise ValidationError("min_leaf must be >= 1")


@dataclass
class GBTModel:
    trees: list[RegressionTree]
    learning_rate: float
    base_prediction: float
    params: GBTParams = GBTParams()
    n_features: int = 0
    train_mse: list[float] = field(default_factory=list)

    def tree_outputs(self, X) -> np.ndarray:
        """``[n_trees, n]`` shrunken per-tree contributions."""
        X = self._check(X)
        return np.array([self.learning_rate * t.predict(X) for t in self.trees]).reshape(len(self.trees), len(X))

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.full(len(X), self.base_prediction)
        for contribution in self.tree_outputs(X):
            out = out + contribution
        return out

    def _check(self, X):
        X = _as_2d(X)
        if self.n_features and X.shape[1] != self.n_features:
            raise LengthMismatch(f"model has {self.n_features} features, input has {X.shape[1]}")
        return X

    def to_dict(self):
        return {"head": "gbt", "params": self.params.__dict__, "learning_rate": self.learning_rate,
                "base_prediction": self.base_prediction, "n_features": self.n_features,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        return cls([RegressionTree.from_dict(t) for t in d["trees"]], d["learning_rate"], d["base_prediction"],
                   GBTParams(**d["params"]), d["n_features"])


def _sorted_sum(v) -> float:
    # summing in sorted order makes the result independent of row order
    return math.fsum(v)


def _best_split(X, r, idx, min_leaf):
    """Best variance-reduction split of rows ``idx``; ``None`` if nothing improves."""
    best_gain, best = 0.0, None
    n = len(idx)
    if n < 2 * min_leaf:
        return None
    total = _sorted_sum(r[idx])
    base = total * total / n
    counts = np.arange(1, n)
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.lexsort((r[idx], xs))
        xs, rs = xs[order], r[idx][order]
        csum = np.cumsum(rs)[:-1]
        ok = (xs[1:] > xs[:-1]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not ok.any():
            continue
        left, right = csum, total - csum
        gain = left * left / counts + right * right / (n - counts) - base
        gain = np.where(ok, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best_gain:
            best_gain = float(gain[pos])
            best = (f, 0.5 * (xs[pos] + xs[pos + 1]))
    return best


def _grow(tree, X, r, idx, depth, max_depth, min_leaf):
    split = _best_split(X, r, idx, min_leaf) if depth < max_depth else None
    if split is None:
        return tree.add(value=_sorted_sum(r[idx]) / len(idx))
    f, thr = split
    node = tree.add(f, float(thr))
    mask = X[idx, f] <= thr
    tree.left[node] = _grow(tree, X, r, idx[mask], depth + 1, max_depth, min_leaf)
    tree.right[node] = _grow(tree, X, r, idx[~mask], depth + 1, max_depth, min_leaf)
    return node


def gbt_fit(X, y, params: GBTParams = GBTParams()) -> GBTModel:
    """Least-squares boosting with exhaustive midpoint split search.

    Split ties go to the lowest feature index, then the lowest threshold.
    ``train_mse[m]`` is the training MSE after ``m`` trees.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=np.float64)
    if len(y) != len(X) or len(y) == 0:
        raise LengthMismatch("one target per row required")
    base = _sorted_sum(y) / len(y)
    model = GBTModel([], params.learning_rate, base, params, X.shape[1])
    pred = np.full(len(y), base)
    model.train_mse.append(float(np.mean((y - pred) ** 2)))
    if np.all(y == y[0]):
        log.warning("all targets equal; returning a base-only model")
        return model
    idx = np.arange(len(y))
    for _ in range(params.n_trees):
        tree = RegressionTree()
        _grow(tree, X, y - pred, idx, 0, params.max_depth, params.min_leaf)
        model.trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(X)
        model.train_mse.append(float(np.mean((y - pred) ** 2)))
    return model


def gbt_predict(model: GBTModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or (model.n_features and len(x) != model.n_features):
        raise LengthMismatch(f"expected {model.n_features} features, got {x.shape}")
    return float(model.predict(x[None])[0])


# persistence ------------------------------------------------------------

def save_model(path, model) -> None:
    atomic_write(path, json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n")


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("head") == "ridge":
        return RidgeModel.from_dict(d)
    if d.get("head") == "gbt":
        return GBTModel.from_dict(d)
    raise ValidationError(f"{path}: unknown head {d.get('head')!r}")

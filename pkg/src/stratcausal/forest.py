"""Random forests for regression and binary classification.

Trees are grown on subsamples (without replacement by default) with
``mtry`` candidate features per node and exhaustive midpoint split search.
For a 0/1 outcome the variance criterion and the Gini criterion pick the same
splits, so classification reuses the regression kernel; only the leaf value
(a class-1 share) and the importance scale (Gini = 2 x squared-error decrease)
differ.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._backend import get_kernels

__all__ = [
    "ForestParams",
    "Tree",
    "Forest",
    "OobPrediction",
    "ImportanceTable",
    "fit_forest",
    "predict",
    "oob_predict",
    "variable_importance",
    "classification_accuracy",
    "tune_forest",
    "save_forest",
    "load_forest",
    "rank_columns",
    "tree_seeds",
]

FORMAT_VERSION = 1
CRIT_VARIANCE = 0
CRIT_CAUSAL_RATIO = 1
CRIT_CAUSAL_GRADIENT = 2

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class ForestParams:
    """Forest hyper-parameters.

    ``mtry`` and ``min_node_size`` left as ``None`` resolve to the task
    defaults: ceil(sqrt(p)) / 1 for classification, ceil(p/3) / 5 for
    regression. ``min_node_size`` is the smallest admissible child size.
    """

    n_trees: int = 1000
    mtry: Optional[int] = None
    min_node_size: Optional[int] = None
    subsample_frac: float = 0.632
    replace: bool = False
    max_depth: Optional[int] = None
    seed: int = 0

    def resolve(self, p: int, task: str) -> "ForestParams":
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        mtry = self.mtry
        if mtry is None:
            mtry = math.ceil(math.sqrt(p)) if task == "classification" else math.ceil(p / 3)
        elif not 1 <= mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {mtry}")
        mtry = int(mtry)
        min_node = self.min_node_size
        if min_node is None:
            min_node = 1 if task == "classification" else 5
        out = replace(self, mtry=mtry, min_node_size=int(min_node))
        out.validate(p)
        return out

    def validate(self, p: int) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and not 1 <= self.mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}]")
        if not 0.0 < self.subsample_frac <= 1.0:
            raise ValueError("subsample_frac must lie in (0, 1]")
        if self.min_node_size is not None and self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    ``value`` holds leaf means of ``y - anchor``; the forest adds the anchor
    back once, after averaging over trees.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_node: np.ndarray
    gain: np.ndarray
    value: np.ndarray
    inbag: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    def apply(self, X: np.ndarray, backend: Optional[str] = None) -> np.ndarray:
        return get_kernels(backend).apply_tree(
            self.feature, self.threshold, self.left, self.right, X
        )

    def oob_mask(self, n: int) -> np.ndarray:
        mask = np.ones(n, dtype=bool)
        mask[self.inbag] = False
        return mask


@dataclass
class Forest:
    params: ForestParams
    trees: list
    task: str
    feature_names: list
    anchor: float
    X_train: np.ndarray = field(repr=False)
    y_train: np.ndarray = field(repr=False)
    backend: Optional[str] = None

    @property
    def n_features(self) -> int:
        return int(self.X_train.shape[1])

    @property
    def n_train(self) -> int:
        return int(self.X_train.shape[0])


@dataclass(frozen=True)
class OobPrediction:
    values: np.ndarray
    n_trees: np.ndarray
    uncovered: np.ndarray

    @property
    def n_uncovered(self) -> int:
        return int(np.count_nonzero(self.uncovered))


@dataclass(frozen=True)
class ImportanceTable:
    names: tuple
    importance: np.ndarray

    def top(self, k: int) -> "ImportanceTable":
        return ImportanceTable(self.names[:k], self.importance[:k])

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.importance.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("rank,variable,importance\n")
            for r, (name, imp) in enumerate(zip(self.names, self.importance), 1):
                fh.write(f"{r},{name},{imp!r}\n")


def rank_columns(X: np.ndarray) -> np.ndarray:
    """Dense per-column ranks (ties share a rank), C-ordered int64."""
    ranks = np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        ranks[:, j] = np.unique(X[:, j], return_inverse=True)[1].reshape(-1)
    return np.ascontiguousarray(ranks)


def tree_seeds(seed: int, n_trees: int) -> list:
    """One independent generator per tree, derived from the master seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n_trees)
    return [np.random.default_rng(c) for c in children]


def _kernel_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1, dtype=np.int64))


def _subsample(rng: np.random.Generator, n: int, frac: float, replace_: bool) -> np.ndarray:
    size = max(1, int(round(frac * n)))
    if replace_:
        idx = rng.integers(0, n, size=size)
    else:
        idx = rng.choice(n, size=min(size, n), replace=False)
    return np.sort(idx).astype(np.int64)


def _grow_one(kernels, ranks, X, a, b, samples, mtry, min_node, max_depth, criterion, seed):
    return kernels.grow_tree(
        ranks, X, a, b, samples, int(mtry), int(min_node),
        -1 if max_depth is None else int(max_depth), int(criterion), np.uint64(seed),
    )


def _map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    return X


def fit_forest(
    X,
    y,
    task: str = "regression",
    params: Optional[ForestParams] = None,
    feature_names: Optional[Sequence[str]] = None,
    backend: Optional[str] = None,
    n_jobs: int = 1,
) -> Forest:
    """Fit a regression or binary-classification forest.

    Parameters
    ----------
    X : array of shape (n, p)
    y : array of shape (n,)
        Real outcome, or 0/1 labels for ``task="classification"``.
    params : ForestParams, optional
    backend : {"cython", "python"}, optional
        Kernel implementation; defaults to the import-time selection.
    n_jobs : int
        Worker threads. Results do not depend on it.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit a forest on zero rows")
    if y.shape[0] != n:
        raise ValueError("X and y have different numbers of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must not contain absent or non-finite values")
    if task == "classification" and not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("classification outcome must be 0/1")
    params = (params or ForestParams()).resolve(p, task)
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(p)]
    feature_names = list(feature_names)
    if len(feature_names) != p:
        raise ValueError("feature_names length does not match X")

    kernels = get_kernels(backend)
    ranks = rank_columns(X)
    # splits see y - y[0]: shifting y by a representable constant leaves the
    # split scan bit-identical
    anchor = float(y[0])
    ya = np.ascontiguousarray(y - anchor)
    zeros = np.zeros(n)
    rngs = tree_seeds(params.seed, params.n_trees)
    plans = []
    for rng in rngs:
        inbag = _subsample(rng, n, params.subsample_frac, params.replace)
        plans.append((inbag, _kernel_seed(rng)))

    def build(plan):
        inbag, kseed = plan
        feat, thr, lft, rgt, nn, gn = _grow_one(
            kernels, ranks, X, ya, zeros, inbag, params.mtry,
            params.min_node_size, params.max_depth, CRIT_VARIANCE, kseed,
        )
        leaves = kernels.apply_tree(feat, thr, lft, rgt, X[inbag])
        sums = np.bincount(leaves, weights=ya[inbag], minlength=feat.shape[0])
        counts = np.bincount(leaves, minlength=feat.shape[0])
        value = np.zeros(feat.shape[0])
        filled = counts > 0
        value[filled] = sums[filled] / counts[filled]
        return Tree(feat, thr, lft, rgt, nn, gn, value, inbag)

    trees = _map(build, plans, n_jobs)
    if np.ptp(y) > 0 and all(t.n_nodes == 1 for t in trees):
        warnings.warn("no admissible split found; every tree is a single leaf", RuntimeWarning)
    return Forest(params, trees, task, feature_names, anchor, X, y, backend)


def _check_columns(f: Forest, X: np.ndarray) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != f.n_features:
        raise ValueError(
            f"X has {X.shape[1]} columns but the forest was trained on {f.n_features}"
        )
    return X


def predict(f: Forest, X) -> np.ndarray:
    """Average of tree leaf values (class-1 probability for classification)."""
    X = _check_columns(f, X)
    out = np.zeros(X.shape[0])
    for t in f.trees:
        out += t.value[t.apply(X, f.backend)]
    return f.anchor + out / len(f.trees)


def oob_predict(f: Forest) -> OobPrediction:
    """Out-of-bag predictions for the training rows.

    Rows never left out of any tree get ``nan`` and ``uncovered=True``.
    """
    n = f.n_train
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    for t in f.trees:
        oob = np.flatnonzero(t.oob_mask(n))
        if oob.size == 0:
            continue
        sums[oob] += t.value[t.apply(f.X_train[oob], f.backend)]
        counts[oob] += 1
    values = np.full(n, np.nan)
    covered = counts > 0
    values[covered] = f.anchor + sums[covered] / counts[covered]
    return OobPrediction(values, counts, ~covered)


def variable_importance(f: Forest) -> ImportanceTable:
    """Total impurity decrease per feature, averaged over trees.

    Regression uses the decrease in squared error, classification the
    decrease in count-weighted Gini impurity. Sorted descending; ties keep
    feature order.
    """
    total = np.zeros(f.n_features)
    for t in f.trees:
        internal = t.feature >= 0
        total += np.bincount(t.feature[internal], weights=t.gain[internal],
                             minlength=f.n_features)
    total /= len(f.trees)
    if f.task == "classification":
        total *= 2.0
    total = np.maximum(total, 0.0)
    order = np.argsort(-total, kind="stable")
    return ImportanceTable(tuple(f.feature_names[j] for j in order), total[order])


def classification_accuracy(probs, actual, threshold: float = 0.5) -> float:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual).reshape(-1)
    if probs.size == 0:
        raise ValueError("empty input")
    if probs.shape != actual.shape:
        raise ValueError("probs and actual differ in length")
    return float(np.mean((probs >= threshold).astype(int) == actual.astype(int)))


def tune_forest(
    X,
    y,
    task: str = "regression",
    params: Optional[ForestParams] = None,
    grid: Optional[dict] = None,
    tuning_trees: int = 200,
    backend: Optional[str] = None,
):
    """Grid search over ``mtry`` x ``min_node_size`` minimising OOB squared error.

    Returns the winning (unresolved ``n_trees``) parameters and a list of
    ``(mtry, min_node_size, oob_mse)`` rows. Ties go to the earlier grid entry.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = X.shape[1]
    params = params or ForestParams()
    if grid is None:
        grid = {
            "mtry": sorted({math.ceil(math.sqrt(p)), math.ceil(p / 3), math.ceil(p / 2)}),
            "min_node_size": [5, 20, 50],
        }
    rows = []
    best = None
    for mtry in grid["mtry"]:
        for min_node in grid["min_node_size"]:
            trial = replace(params, mtry=min(max(1, mtry), p), min_node_size=min_node,
                            n_trees=min(tuning_trees, params.n_trees))
            f = fit_forest(X, y, task, trial, backend=backend)
            oob = oob_predict(f)
            ok = ~oob.uncovered
            mse = float(np.mean((oob.values[ok] - y[ok]) ** 2)) if ok.any() else np.inf
            rows.append((trial.mtry, min_node, mse))
            if best is None or mse < best[2]:
                best = (trial.mtry, min_node, mse)
    return replace(params, mtry=best[0], min_node_size=best[1]), rows


def save_forest(f: Forest, path) -> None:
    """Write a forest to a versioned ``.npz`` archive (exact round trip)."""
    meta = {
        "format_version": FORMAT_VERSION,
        "params": asdict(f.params),
        "task": f.task,
        "feature_names": f.feature_names,
        "anchor": f.anchor.hex(),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
              "X_train": f.X_train, "y_train": f.y_train}
    for name in ("feature", "threshold", "left", "right", "n_node", "gain", "value", "inbag"):
        parts = [getattr(t, name) for t in f.trees]
        arrays[name] = np.concatenate(parts)
        arrays[name + "_len"] = np.array([len(x) for x in parts], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_forest(path, backend: Optional[str] = None) -> Forest:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest format {meta.get('format_version')!r}")
        cols = {}
        for name in ("feature", "threshold", "left", "right", "n_node", "gain", "value", "inbag"):
            bounds = np.concatenate([[0], np.cumsum(z[name + "_len"])])
            data = z[name]
            cols[name] = [data[bounds[i]:bounds[i + 1]].copy() for i in range(len(bounds) - 1)]
        X_train = z["X_train"].copy()
        y_train = z["y_train"].copy()
    trees = [Tree(*(cols[k][i] for k in ("feature", "threshold", "left", "right",
                                          "n_node", "gain", "value", "inbag")))
             for i in range(len(cols["feature"]))]
    return Forest(ForestParams(**meta["params"]), trees, meta["task"], meta["feature_names"],
                  float.fromhex(meta["anchor"]), X_train, y_train, backend)

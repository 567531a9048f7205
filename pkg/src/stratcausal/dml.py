"""Double machine learning for the binarized discount.

Nuisances are cross-fitted: every observation's outcome regressions and
propensity score come from forests trained on the other folds.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._seeds import derive_seed
from .causal_forest import two_sided_p
from .forest import ForestParams, _as_matrix, fit_forest, predict

__all__ = [
    "NuisanceEstimates",
    "DrAteResult",
    "fold_ids",
    "crossfit_nuisances",
    "trim",
    "dr_score",
    "dr_scores",
    "estimate_ate",
    "dml_ate",
    "propensity_histogram",
]

P_CLIP = 1e-6


@dataclass(frozen=True)
class NuisanceEstimates:
    mu0: np.ndarray
    mu1: np.ndarray
    p1: np.ndarray
    fold: np.ndarray

    def __post_init__(self):
        n = self.mu0.shape[0]
        if not (self.mu1.shape[0] == self.p1.shape[0] == self.fold.shape[0] == n):
            raise ValueError("nuisance vectors differ in length")

    def __len__(self) -> int:
        return int(self.mu0.shape[0])

    def subset(self, idx) -> "NuisanceEstimates":
        return NuisanceEstimates(self.mu0[idx], self.mu1[idx], self.p1[idx], self.fold[idx])


@dataclass(frozen=True)
class DrAteResult:
    ate: float
    se: float
    p_value: float
    n_used: int
    n_trimmed: int
    threshold: float

    @property
    def n(self) -> int:
        return self.n_used + self.n_trimmed


def fold_ids(n: int, k_folds: int, seed: int) -> np.ndarray:
    """Balanced random fold labels 0..k-1, fixed by ``seed``."""
    if not 2 <= k_folds <= n:
        raise ValueError(f"k_folds must lie in [2, n={n}]")
    perm = np.random.default_rng(derive_seed(seed, "folds")).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % k_folds
    return fold


def crossfit_nuisances(X, y, dtilde, k_folds: int = 3, seed: int = 0,
                       params: Optional[ForestParams] = None,
                       propensity_params: Optional[ForestParams] = None,
                       backend: Optional[str] = None, n_jobs: int = 1) -> NuisanceEstimates:
    """Cross-fitted ``mu0``, ``mu1`` and ``p1`` for each observation.

    Parameters
    ----------
    X : array (n, p)
    y : array (n,)
    dtilde : 0/1 array (n,)
    k_folds : int
        Number of folds; ``n`` gives leave-one-out.
    params : ForestParams, optional
        Outcome-regression forests.
    propensity_params : ForestParams, optional
        Probability forest; minimum node size 10 unless set.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    dt = np.asarray(dtilde).reshape(-1)
    n = X.shape[0]
    if y.shape[0] != n or dt.shape[0] != n:
        raise ValueError("X, y and dtilde differ in length")
    if not np.all((dt == 0) | (dt == 1)):
        raise ValueError("dtilde must be 0/1")
    dt = dt.astype(np.float64)
    params = params or ForestParams()
    if propensity_params is None:
        propensity_params = replace(params, min_node_size=10)
    fold = fold_ids(n, k_folds, seed)
    for k in range(k_folds):
        train = fold != k
        n1 = int(dt[train].sum())
        if n1 == 0 or n1 == int(train.sum()):
            raise ValueError(f"training data for fold {k} holds a single treatment arm; "
                             "use fewer folds")

    def fit_fold(k):
        train = fold != k
        test = fold == k
        t1 = train & (dt == 1)
        t0 = train & (dt == 0)
        m1 = fit_forest(X[t1], y[t1], "regression",
                        replace(params, seed=derive_seed(seed, "mu1", k)), backend=backend)
        m0 = fit_forest(X[t0], y[t0], "regression",
                        replace(params, seed=derive_seed(seed, "mu0", k)), backend=backend)
        pf = fit_forest(X[train], dt[train], "classification",
                        replace(propensity_params, seed=derive_seed(seed, "p1", k)),
                        backend=backend)
        Xt = X[test]
        return predict(m0, Xt), predict(m1, Xt), predict(pf, Xt)

    mu0 = np.empty(n)
    mu1 = np.empty(n)
    p1 = np.empty(n)
    if n_jobs and n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(fit_fold, range(k_folds)))
    else:
        parts = [fit_fold(k) for k in range(k_folds)]
    for k, (a, b, c) in enumerate(parts):
        test = fold == k
        mu0[test], mu1[test], p1[test] = a, b, c
    p1 = np.clip(p1, P_CLIP, 1.0 - P_CLIP)
    return NuisanceEstimates(mu0, mu1, p1, fold)


def trim(p1, threshold: float = 0.01) -> np.ndarray:
    """Indices with ``threshold <= p1 <= 1 - threshold``."""
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1)
    if not 0.0 <= threshold < 0.5:
        raise ValueError("threshold must lie in [0, 0.5)")
    if np.any((p1 <= 0) | (p1 >= 1)):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    kept = np.flatnonzero((p1 >= threshold) & (p1 <= 1.0 - threshold))
    if kept.size == 0:
        raise ValueError("trimming removed every observation")
    return kept


def dr_scores(y, dtilde, mu0, mu1, p1) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    dt = np.asarray(dtilde, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if np.any((p1 <= 0) | (p1 >= 1)):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    return mu1 - mu0 + dt * (y - mu1) / p1 - (1.0 - dt) * (y - mu0) / (1.0 - p1)


def dr_score(y, dtilde, mu0, mu1, p1) -> float:
    """Doubly robust score of a single observation."""
    return float(dr_scores(y, dtilde, mu0, mu1, p1))


def estimate_ate(scores, n_trimmed: int = 0, threshold: float = float("nan")) -> DrAteResult:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = s.size
    if n == 0:
        raise ValueError("no scores to average")
    if n < 30:
        warnings.warn("fewer than 30 observations; normal approximation unreliable",
                      RuntimeWarning)
    ate = float(np.mean(s))
    se = float(np.std(s, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    if np.ptp(s) == 0:
        ate, se = float(s[0]), 0.0
    return DrAteResult(ate, se, two_sided_p(ate, se), int(n), int(n_trimmed), float(threshold))


def dml_ate(X, y, dtilde, k_folds: int = 3, threshold: float = 0.01, seed: int = 0,
            params: Optional[ForestParams] = None, nuisances: Optional[NuisanceEstimates] = None,
            backend: Optional[str] = None, n_jobs: int = 1):
    """Cross-fit (unless ``nuisances`` is given), trim, and average the scores.

    Returns ``(result, nuisances, kept_indices, scores)``.
    """
    if nuisances is None:
        nuisances = crossfit_nuisances(X, y, dtilde, k_folds, seed, params,
                                       backend=backend, n_jobs=n_jobs)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    dt = np.asarray(dtilde, dtype=np.float64).reshape(-1)
    kept = trim(nuisances.p1, threshold)
    s = dr_scores(y[kept], dt[kept], nuisances.mu0[kept], nuisances.mu1[kept], nuisances.p1[kept])
    res = estimate_ate(s, n_trimmed=y.size - kept.size, threshold=threshold)
    return res, nuisances, kept, s


def propensity_histogram(p1, dtilde, bins: int = 20):
    """Bin counts of the propensity score per arm on a common [0, 1] grid."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    p1 = np.asarray(p1, dtype=np.float64)
    dt = np.asarray(dtilde).astype(bool)
    treated = np.histogram(p1[dt], bins=edges)[0]
    control = np.histogram(p1[~dt], bins=edges)[0]
    return edges, treated, control

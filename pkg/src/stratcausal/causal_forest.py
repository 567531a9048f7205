"""Orthogonalized causal forest for a continuous treatment.

Outcome and treatment are first residualized on the covariates with
out-of-bag regression forests. Honest causal trees then split on one half of
each tree's subsample and estimate leaf effects
``sum(y_res * d_res) / sum(d_res**2)`` on the other half. Trees come in
groups sharing a half-sample, which gives a between-group / within-group
variance estimate for each conditional effect.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from ._backend import get_kernels
from ._seeds import derive_seed
from .forest import (
    CRIT_CAUSAL_GRADIENT,
    CRIT_CAUSAL_RATIO,
    Forest,
    ForestParams,
    _as_matrix,
    _grow_one,
    _kernel_seed,
    _map,
    fit_forest,
    oob_predict,
    rank_columns,
    tree_seeds,
    tune_forest,
)

__all__ = [
    "CausalForestParams",
    "Residualization",
    "CausalForest",
    "CapeEstimate",
    "ApeEstimate",
    "DrScores",
    "residualize",
    "fit_causal_forest",
    "estimate_cape",
    "estimate_ape",
    "doubly_robust_scores_continuous",
    "causal_forest_ape",
]

SPLIT_RULES = {"ratio": CRIT_CAUSAL_RATIO, "gradient": CRIT_CAUSAL_GRADIENT}


@dataclass(frozen=True)
class CausalForestParams:
    n_trees: int = 1000
    group_size: int = 4
    sample_frac: float = 0.5
    honesty_frac: float = 0.5
    mtry: Optional[int] = None
    min_node_size: int = 5
    split_rule: str = "ratio"
    seed: int = 0
    nuisance: ForestParams = ForestParams()
    tune_nuisance: bool = False
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.n_trees < 1 or self.group_size < 1:
            raise ValueError("n_trees and group_size must be positive")
        if not 0.0 < self.sample_frac <= 1.0:
            raise ValueError("sample_frac must lie in (0, 1]")
        if not 0.0 < self.honesty_frac < 1.0:
            raise ValueError("honesty_frac must lie in (0, 1)")
        if self.split_rule not in SPLIT_RULES:
            raise ValueError(f"split_rule must be one of {sorted(SPLIT_RULES)}")

    def resolved_mtry(self, p: int) -> int:
        if self.mtry is None:
            return min(math.ceil(math.sqrt(p)) + 20, p)
        return max(1, min(int(self.mtry), p))


@dataclass(frozen=True)
class Residualization:
    """Out-of-bag residuals; rows no tree left out are ``nan`` and uncovered."""

    y_res: np.ndarray
    d_res: np.ndarray
    y_hat: np.ndarray
    d_hat: np.ndarray
    covered: np.ndarray
    y_forest: Forest = field(repr=False)
    d_forest: Forest = field(repr=False)

    @property
    def mean_y_res(self) -> float:
        return float(np.mean(self.y_res[self.covered]))

    @property
    def mean_d_res(self) -> float:
        return float(np.mean(self.d_res[self.covered]))


@dataclass
class _CausalTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mean_yd: np.ndarray
    mean_dd: np.ndarray
    n_est: np.ndarray
    group: int
    split_idx: np.ndarray
    est_idx: np.ndarray


@dataclass
class CausalForest:
    params: CausalForestParams
    trees: list
    groups: list
    X_train: np.ndarray = field(repr=False)
    y_res: np.ndarray = field(repr=False)
    d_res: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    residuals: Optional[Residualization] = field(default=None, repr=False)
    variance_forest: Optional[Forest] = field(default=None, repr=False)
    backend: Optional[str] = None

    @property
    def n(self) -> int:
        return int(self.X_train.shape[0])

    def check_honesty(self) -> bool:
        return all(np.intersect1d(t.split_idx, t.est_idx).size == 0 for t in self.trees)


@dataclass(frozen=True)
class CapeEstimate:
    tau: np.ndarray
    se: np.ndarray
    p_value: np.ndarray
    extrapolated: np.ndarray

    @property
    def significant_05(self) -> np.ndarray:
        return np.nan_to_num(self.p_value, nan=1.0) < 0.05

    @property
    def significant_10(self) -> np.ndarray:
        return np.nan_to_num(self.p_value, nan=1.0) < 0.10


@dataclass(frozen=True)
class ApeEstimate:
    theta: float
    se: float
    p_value: float
    n: int


@dataclass(frozen=True)
class DrScores:
    scores: np.ndarray
    kept: np.ndarray
    tau_oob: np.ndarray
    v_hat: np.ndarray


SUPPORT_SHARE = 0.05


def two_sided_p(est, se):
    est = np.asarray(est, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 2.0 * norm.sf(np.abs(est) / se)
    p = np.where(se > 0, p, np.nan)
    return float(p) if p.ndim == 0 else p


# ------------------------------------------------------------ residualize

def residualize(X, y, d, params: CausalForestParams = CausalForestParams(),
                backend: Optional[str] = None) -> Residualization:
    """Partial the covariates out of outcome and treatment with OOB forests."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if not (X.shape[0] == y.shape[0] == d.shape[0]):
        raise ValueError("X, y and d differ in length")
    # residuals are shift-invariant; subtracting an observed value keeps them
    # bit-identical under exact shifts of y or d
    y0 = y - y[0]
    d0 = d - d[0]
    y_params = replace(params.nuisance, seed=derive_seed(params.seed, "outcome"))
    d_params = replace(params.nuisance, seed=derive_seed(params.seed, "treatment"))
    if params.tune_nuisance:
        y_params, _ = tune_forest(X, y0, "regression", y_params, backend=backend)
        d_params, _ = tune_forest(X, d0, "regression", d_params, backend=backend)
    fy = fit_forest(X, y0, "regression", y_params, backend=backend)
    fd = fit_forest(X, d0, "regression", d_params, backend=backend)
    oy = oob_predict(fy)
    od = oob_predict(fd)
    covered = ~(oy.uncovered | od.uncovered)
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} observation(s) without out-of-bag trees "
                      "excluded", RuntimeWarning)
    y_res = y0 - oy.values
    d_res = d0 - od.values
    # warn when the covariates explain at least 95% of the treatment variance
    v = np.var(d_res[covered]) if covered.any() else 0.0
    if not v > SUPPORT_SHARE * np.var(d):
        warnings.warn("treatment is (nearly) a deterministic function of the covariates; "
                      "common support is doubtful", RuntimeWarning)
    return Residualization(y_res, d_res, oy.values, od.values, covered, fy, fd)


# ------------------------------------------------------------ fitting

def _node_stats(tree_arrays, est_leaves, yd, dd):
    feature, threshold, left, right = tree_arrays
    k = feature.shape[0]
    s_yd = np.bincount(est_leaves, weights=yd, minlength=k)
    s_dd = np.bincount(est_leaves, weights=dd, minlength=k)
    cnt = np.bincount(est_leaves, minlength=k).astype(np.float64)
    # children always carry larger ids than their parent
    for node in range(k - 1, -1, -1):
        if feature[node] >= 0:
            l, r = left[node], right[node]
            s_yd[node] = s_yd[l] + s_yd[r]
            s_dd[node] = s_dd[l] + s_dd[r]
            cnt[node] = cnt[l] + cnt[r]
    return s_yd, s_dd, cnt


def _collapse(feature, s_dd, cnt, left, right):
    """Turn any split with an estimation-empty child into a leaf."""
    feature = feature.copy()
    valid = (cnt > 0) & (s_dd > 0)
    stack = [0]
    while stack:
        node = stack.pop()
        if feature[node] < 0:
            continue
        l, r = left[node], right[node]
        if not (valid[l] and valid[r]):
            feature[node] = -1
        else:
            stack.extend((r, l))
    return feature


def fit_causal_forest(res: Residualization, X, params: CausalForestParams = CausalForestParams(),
                      backend: Optional[str] = None, n_jobs: int = 1) -> CausalForest:
    X = _as_matrix(X)
    rows = np.flatnonzero(res.covered)
    Xc = np.ascontiguousarray(X[rows])
    yr = np.ascontiguousarray(res.y_res[rows])
    dr = np.ascontiguousarray(res.d_res[rows])
    cf = _grow_causal(Xc, yr, dr, params, backend, n_jobs)
    cf.rows = rows
    cf.residuals = res
    return cf


def _grow_causal(X, yr, dr, params, backend, n_jobs):
    n, p = X.shape
    if n < 2 or not np.var(dr) > 0:
        raise ValueError("treatment residuals have no variation")
    kernels = get_kernels(backend)
    ranks = rank_columns(X)
    yd = yr * dr
    dd = dr * dr
    mtry = params.resolved_mtry(p)
    criterion = SPLIT_RULES[params.split_rule]
    n_groups = max(1, math.ceil(params.n_trees / params.group_size))
    half_size = max(2, int(math.floor(params.sample_frac * n)))
    group_rngs = tree_seeds(derive_seed(params.seed, "causal"), n_groups)
    groups = []
    plans = []
    for g, grng in enumerate(group_rngs):
        half = np.sort(grng.choice(n, size=min(half_size, n), replace=False)).astype(np.int64)
        groups.append(half)
        n_split = max(1, int(math.floor(params.honesty_frac * half.size)))
        for trng in grng.spawn(params.group_size):
            perm = trng.permutation(half)
            plans.append((g, np.sort(perm[:n_split]), np.sort(perm[n_split:]),
                          _kernel_seed(trng)))

    def build(plan):
        g, split_idx, est_idx, kseed = plan
        feat, thr, lft, rgt, _, _ = _grow_one(
            kernels, ranks, X, yd, dd, split_idx, mtry, params.min_node_size,
            None, criterion, kseed,
        )
        est_leaves = kernels.apply_tree(feat, thr, lft, rgt, X[est_idx])
        s_yd, s_dd, cnt = _node_stats((feat, thr, lft, rgt), est_leaves,
                                      yd[est_idx], dd[est_idx])
        feat = _collapse(feat, s_dd, cnt, lft, rgt)
        with np.errstate(divide="ignore", invalid="ignore"):
            m_yd = np.where(cnt > 0, s_yd / cnt, 0.0)
            m_dd = np.where(cnt > 0, s_dd / cnt, 0.0)
        return _CausalTree(feat, thr, lft, rgt, m_yd, m_dd, cnt.astype(np.int64),
                           g, split_idx, est_idx)

    trees = _map(build, plans, n_jobs)
    cf = CausalForest(params, trees, groups, X, yr, dr, np.arange(n), backend=backend)
    vparams = replace(params.nuisance, seed=derive_seed(params.seed, "variance"))
    cf.variance_forest = fit_forest(X, dd, "regression", vparams, backend=backend)
    return cf


# ------------------------------------------------------------ prediction

def _leaf_moments(cf: CausalForest, Xq: np.ndarray):
    kernels = get_kernels(cf.backend)
    T, q = len(cf.trees), Xq.shape[0]
    myd = np.empty((T, q))
    mdd = np.empty((T, q))
    for t, tree in enumerate(cf.trees):
        leaf = kernels.apply_tree(tree.feature, tree.threshold, tree.left, tree.right, Xq)
        myd[t] = tree.mean_yd[leaf]
        mdd[t] = tree.mean_dd[leaf]
    return myd, mdd


def _cape_chunk(cf: CausalForest, Xq: np.ndarray, eligible_groups: Optional[np.ndarray]):
    ell = cf.params.group_size
    G = len(cf.groups)
    myd, mdd = _leaf_moments(cf, Xq)
    q = Xq.shape[0]
    if eligible_groups is None:
        eligible_groups = np.ones((G, q), dtype=bool)
    elig = np.repeat(eligible_groups, ell, axis=0)
    w = elig.astype(np.float64)
    sum_yd = np.zeros(q)
    sum_dd = np.zeros(q)
    for t in range(len(cf.trees)):
        sum_yd += w[t] * myd[t]
        sum_dd += w[t] * mdd[t]
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = sum_yd / sum_dd
        n_trees = w.sum(axis=0)
        b_mean = sum_dd / n_trees
        psi = (myd - tau * mdd) / b_mean
        psi_g = psi.reshape(G, ell, q).mean(axis=1)
        g_count = eligible_groups.sum(axis=0).astype(np.float64)
        psi_bar = np.where(eligible_groups, psi_g, 0.0).sum(axis=0) / g_count
        between = np.where(eligible_groups, (psi_g - psi_bar) ** 2, 0.0).sum(axis=0) / (g_count - 1)
        if ell > 1:
            dev = (psi.reshape(G, ell, q) - psi_g[:, None, :]) ** 2
            within = np.where(eligible_groups, dev.sum(axis=1), 0.0).sum(axis=0) / (g_count * (ell - 1))
            var = np.maximum(between - within / ell, 0.0)
        else:
            var = np.full(q, np.nan)
    var = np.where(g_count >= 2, var, np.nan)
    return tau, np.sqrt(var)


def estimate_cape(cf: CausalForest, X=None, oob: bool = False, chunk: int = 512) -> CapeEstimate:
    """Conditional effects at the rows of ``X``.

    With ``oob=True`` (and ``X`` the training covariates) each row only uses
    tree groups whose half-sample excludes it.
    """
    if oob:
        Xq = cf.X_train
    else:
        Xq = _as_matrix(X)
        if Xq.shape[1] != cf.X_train.shape[1]:
            raise ValueError("covariate columns do not match the training data")
    q = Xq.shape[0]
    tau = np.empty(q)
    se = np.empty(q)
    if oob:
        member = np.zeros((len(cf.groups), q), dtype=bool)
        for g, half in enumerate(cf.groups):
            member[g, half] = True
    for start in range(0, q, chunk):
        stop = min(q, start + chunk)
        elig = None if not oob else ~member[:, start:stop]
        tau[start:stop], se[start:stop] = _cape_chunk(cf, Xq[start:stop], elig)
    lo = cf.X_train.min(axis=0)
    hi = cf.X_train.max(axis=0)
    extrap = np.any((Xq < lo) | (Xq > hi), axis=1)
    return CapeEstimate(tau, se, two_sided_p(tau, se), extrap)


def doubly_robust_scores_continuous(cf: CausalForest) -> DrScores:
    """Per-observation orthogonal scores whose mean is the APE.

    ``tau + d_res * (y_res - tau * d_res) / V(x)`` with ``tau`` the OOB CAPE
    and ``V`` the OOB forest estimate of var(D | X). Rows with ``V`` below the
    floor, or without an OOB CAPE, are excluded.
    """
    tau = estimate_cape(cf, oob=True).tau
    v_hat = oob_predict(cf.variance_forest).values
    kept = np.isfinite(tau) & np.isfinite(v_hat) & (v_hat >= cf.params.variance_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = tau + cf.d_res * (cf.y_res - tau * cf.d_res) / v_hat
    scores = np.where(kept, scores, np.nan)
    n_drop = int((~kept).sum())
    if n_drop:
        warnings.warn(f"{n_drop} observation(s) excluded from the scores "
                      "(variance below floor or no out-of-bag trees)", RuntimeWarning)
    return DrScores(scores, kept, tau, v_hat)


def estimate_ape(cf: CausalForest, scores: Optional[DrScores] = None) -> ApeEstimate:
    if scores is None:
        scores = doubly_robust_scores_continuous(cf)
    s = scores.scores[scores.kept]
    n = int(s.size)
    if n == 0:
        raise ValueError("no usable scores")
    if n < 30:
        warnings.warn("fewer than 30 observations; normal approximation unreliable",
                      RuntimeWarning)
    theta = float(np.mean(s))
    se = float(np.std(s, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return ApeEstimate(theta, se, two_sided_p(theta, se), n)


def causal_forest_ape(X, y, d, params: CausalForestParams = CausalForestParams(),
                      backend: Optional[str] = None, n_jobs: int = 1):
    """Residualize, fit, score: returns ``(forest, scores, ape)``."""
    res = residualize(X, y, d, params, backend)
    cf = fit_causal_forest(res, X, params, backend, n_jobs)
    scores = doubly_robust_scores_continuous(cf)
    return cf, scores, estimate_ape(cf, scores)

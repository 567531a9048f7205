"""Checks of the identifying assumptions and effect-heterogeneity summaries.

Monotonicity implies that the share of buyers making an additional trip,
1 - S(0), rises with the discount given X. Among always buyers the discount
must be unrelated to personal characteristics W once X is held fixed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._seeds import derive_seed
from .benchmarks import independent_columns, ols, robust_wald
from .causal_forest import CapeEstimate, CausalForestParams, causal_forest_ape, estimate_cape
from .data import (
    Dataset,
    TreatmentSpec,
    balance_binary_outcome,
    binarize_treatment,
    train_test_split,
)
from .dml import dml_ate
from .forest import (
    ForestParams,
    ImportanceTable,
    classification_accuracy,
    fit_forest,
    predict,
    variable_importance,
)
from .report import ResultRecord

__all__ = [
    "CapeDistribution",
    "MonotonicityReport",
    "WaldIndependenceTable",
    "BlpReport",
    "cape_distribution",
    "monotonicity_tests",
    "independence_wald",
    "blp_heterogeneity",
    "PredictiveResult",
    "predictive_accuracy",
    "MULTIPLICITY_NOTE",
]

MULTIPLICITY_NOTE = "p-values are not adjusted for multiple hypothesis testing"


@dataclass(frozen=True)
class CapeDistribution:
    edges: np.ndarray
    counts: np.ndarray
    share_positive: float
    share_sig_10: float
    share_sig_05: float
    n: int


def cape_distribution(cape: CapeEstimate, bins: int = 30) -> CapeDistribution:
    """Histogram of conditional effects over their range plus significance shares."""
    tau = cape.tau
    ok = np.isfinite(tau)
    t = tau[ok]
    if t.size == 0:
        raise ValueError("no finite conditional effects")
    lo, hi = float(t.min()), float(t.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(t, bins=bins, range=(lo, hi))
    return CapeDistribution(edges, counts, float(np.mean(t > 0)),
                            float(np.mean(cape.significant_10[ok])),
                            float(np.mean(cape.significant_05[ok])), int(t.size))


@dataclass(frozen=True)
class MonotonicityReport:
    cf: ResultRecord
    lr: ResultRecord
    dml: ResultRecord
    distribution: CapeDistribution
    violation: bool

    @property
    def records(self) -> list:
        return [self.cf, self.lr, self.dml]


def monotonicity_tests(ds: Dataset, cf_params: CausalForestParams = CausalForestParams(),
                       forest_params: Optional[ForestParams] = None, k_folds: int = 3,
                       trim: float = 0.01, spec: TreatmentSpec = TreatmentSpec(),
                       seed: int = 0, bins: int = 30, backend: Optional[str] = None,
                       n_jobs: int = 1) -> MonotonicityReport:
    """Three tests of whether 1 - S(0) increases in the discount given X.

    Run on the full survey sample, not the always-buyer subsample. A
    violation is flagged when any estimate is negative at the 5% level.
    """
    outcome = ds.additional_trip
    if np.ptp(outcome) == 0:
        raise ValueError("S(0) is constant in the sample; the test is undefined")
    X = ds.X
    cf, _, ape = causal_forest_ape(X, outcome, ds.d, cf_params, backend, n_jobs)
    cape = estimate_cape(cf, oob=True)
    dist = cape_distribution(cape, bins)
    cf_rec = ResultRecord("cf_average_change", ape.theta, ape.se, ape.p_value, ape.n)

    names = ["const", "d"] + list(ds.x_names)
    fit = ols(outcome, np.column_stack([np.ones(ds.n), ds.d, X]), names)
    r = fit.row("d")
    lr_rec = ResultRecord("lr_coefficient", r["effect"], r["se"], r["p_value"], ds.n)

    dt = binarize_treatment(ds.d, spec)
    res, *_ = dml_ate(X, outcome, dt, k_folds=k_folds, threshold=trim, seed=seed,
                      params=forest_params, backend=backend, n_jobs=n_jobs)
    dml_rec = ResultRecord("dml_contrast", res.ate, res.se, res.p_value, res.n_used,
                           res.n_trimmed, trim)
    violation = any(rec.effect < 0 and rec.p_value < 0.05
                    for rec in (cf_rec, lr_rec, dml_rec))
    return MonotonicityReport(cf_rec, lr_rec, dml_rec, dist, violation)


@dataclass(frozen=True)
class WaldIndependenceTable:
    variables: tuple
    coefficients: np.ndarray
    statistics: np.ndarray
    df: np.ndarray
    p_values: np.ndarray
    notes: tuple

    @property
    def tested(self) -> np.ndarray:
        return np.isfinite(self.p_values)

    @property
    def average_p_value(self) -> float:
        p = self.p_values[self.tested]
        return float(p.mean()) if p.size else float("nan")

    @property
    def n_significant_05(self) -> int:
        return int(np.sum(self.p_values[self.tested] < 0.05))

    def rows(self):
        for i, v in enumerate(self.variables):
            yield (v, self.coefficients[i], self.statistics[i], int(self.df[i]),
                   self.p_values[i], self.notes[i])


def independence_wald(ds: Dataset) -> WaldIndependenceTable:
    """Regress D on X plus one W variable at a time; robust Wald test on the W block.

    One-hot columns sharing a source variable are tested jointly.
    """
    if ds.W.shape[1] == 0:
        raise ValueError("no W variables to test")
    groups = []
    for j, g in enumerate(ds.w_groups):
        if not groups or groups[-1][0] != g:
            groups.append((g, []))
        groups[-1][1].append(j)
    base = np.column_stack([np.ones(ds.n), ds.X])
    base_names = ["const"] + list(ds.x_names)
    variables, coefs, stats, dfs, pvals, notes = [], [], [], [], [], []
    for g, cols in groups:
        Wg = ds.W[:, cols]
        # a full one-hot block is collinear with the intercept; drop its first level
        if len(cols) > 1 and np.allclose(Wg.sum(axis=1), 1.0):
            cols = cols[1:]
            Wg = ds.W[:, cols]
        design = np.column_stack([base, Wg])
        kept = independent_columns(design)
        variables.append(g)
        dfs.append(len(cols))
        if not set(range(base.shape[1], design.shape[1])) <= set(kept.tolist()):
            coefs.append(np.nan)
            stats.append(np.nan)
            pvals.append(np.nan)
            notes.append("skipped: collinear with X")
            continue
        wn = [ds.w_names[j] for j in cols]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = ols(ds.d, design, base_names + wn)
        stat, p = robust_wald(fit, wn)
        coefs.append(fit.coef(wn[0]) if len(wn) == 1 else np.nan)
        stats.append(stat)
        pvals.append(p)
        notes.append("")
    return WaldIndependenceTable(tuple(variables), np.array(coefs), np.array(stats),
                                 np.array(dfs), np.array(pvals), tuple(notes))


@dataclass(frozen=True)
class BlpReport:
    names: tuple
    coefficients: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    n: int = 0
    dropped: tuple = field(default=())

    def rows(self):
        return zip(self.names, self.coefficients, self.se, self.p_values)


def blp_heterogeneity(scores, basis, names: Optional[Sequence[str]] = None) -> BlpReport:
    """Robust OLS of doubly robust scores on a basis that contains an intercept."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    B = np.asarray(basis, dtype=np.float64)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if B.shape[0] != s.size:
        raise ValueError("basis rows do not align with the scores")
    if not np.any(np.all(B == B[0:1], axis=0) & (B[0] != 0)):
        raise ValueError("basis must include an intercept column")
    fit = ols(s, B, names)
    return BlpReport(fit.names, fit.coefficients, fit.se, fit.p_values, s.size, fit.dropped)


@dataclass(frozen=True)
class PredictiveResult:
    outcome: str
    accuracy: float
    importance: ImportanceTable
    n_train: int
    n_test: int


def predictive_accuracy(ds: Dataset, outcome: str = "demand_shift",
                        params: Optional[ForestParams] = None, seed: int = 0,
                        drop: Sequence[str] = (), train_frac: float = 0.75,
                        n_jobs: int = 1) -> PredictiveResult:
    """Balance the outcome, split, fit a classification forest on D, X and W.

    Accuracy is the held-out correct prediction rate at a 0.5 cut-off.
    Predictors whose source name is in ``drop`` (case-insensitive) are removed.
    """
    bal = balance_binary_outcome(ds, outcome, seed=derive_seed(seed, "balance"))
    train, test = train_test_split(bal, train_frac, seed=derive_seed(seed, "split"))
    dropped = {d.lower() for d in drop}

    def design(part):
        X, names = part.controls(include_w=True)
        M = np.column_stack([part.d, X])
        names = ["discount"] + names
        keep = [j for j, nm in enumerate(names) if nm.split("=")[0].lower() not in dropped]
        return M[:, keep], [names[j] for j in keep]

    Xtr, names = design(train)
    Xte, _ = design(test)
    ytr, yte = train.outcome(outcome), test.outcome(outcome)
    if np.ptp(ytr) == 0:
        raise ValueError(f"outcome {outcome!r} is constant in the training split")
    f = fit_forest(Xtr, ytr, "classification", params, feature_names=names, n_jobs=n_jobs)
    acc = classification_accuracy(predict(f, Xte), yte)
    return PredictiveResult(outcome, acc, variable_importance(f), train.n, test.n)

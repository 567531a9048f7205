"""Conventional estimators used as benchmarks.

OLS with heteroskedasticity-robust (HC1) standard errors, probit maximum
likelihood by Newton-Raphson, and one-to-one nearest-neighbour matching on
the propensity score with a bootstrap standard error.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr
from scipy.stats import chi2

from .causal_forest import two_sided_p

__all__ = [
    "OlsFit",
    "ProbitFit",
    "PsmBootstrap",
    "independent_columns",
    "ols",
    "robust_wald",
    "probit_fit",
    "probit_loglik",
    "psm_ate",
    "bootstrap_psm",
]


# ---------------------------------------------------------------- OLS

def independent_columns(A: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Greedy left-to-right selection of linearly independent columns."""
    A = np.asarray(A, dtype=np.float64)
    keep = []
    Q = np.zeros((A.shape[0], 0))
    for j in range(A.shape[1]):
        col = A[:, j]
        norm = np.linalg.norm(col)
        if norm == 0:
            continue
        r = col - Q @ (Q.T @ col)
        r = r - Q @ (Q.T @ r)  # second pass for stability
        rn = np.linalg.norm(r)
        if rn > rtol * norm:
            keep.append(j)
            Q = np.column_stack([Q, r / rn])
    return np.asarray(keep, dtype=np.int64)


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    residuals: np.ndarray
    names: tuple
    kept: np.ndarray
    dropped: tuple
    vcov: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.residuals.shape[0])

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def row(self, name: str) -> dict:
        j = self.names.index(name)
        return {"effect": float(self.coefficients[j]), "se": float(self.se[j]),
                "p_value": float(self.p_values[j])}


def ols(y, design, names: Optional[Sequence[str]] = None) -> OlsFit:
    """Least squares with HC1 sandwich standard errors.

    Collinear columns are dropped (first occurrence kept) with a warning.
    """
    X = np.asarray(design, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, p = X.shape
    if y.shape[0] != n:
        raise ValueError("y and design differ in length")
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("names do not match the design columns")
    kept = independent_columns(X)
    dropped = tuple(names[j] for j in range(p) if j not in set(kept.tolist()))
    if dropped:
        warnings.warn(f"dropped collinear column(s) {list(dropped)}", RuntimeWarning)
    Xk = X[:, kept]
    k = Xk.shape[1]
    if n <= k:
        raise ValueError(f"need more observations ({n}) than regressors ({k})")
    beta, *_ = np.linalg.lstsq(Xk, y, rcond=None)
    resid = y - Xk @ beta
    bread = np.linalg.inv(Xk.T @ Xk)
    Xe = Xk * resid[:, None]
    meat = Xe.T @ Xe
    vcov = bread @ meat @ bread * (n / (n - k))
    vcov = (vcov + vcov.T) / 2.0
    se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    return OlsFit(beta, se, two_sided_p(beta, se), resid,
                  tuple(names[j] for j in kept), kept, dropped, vcov)


def robust_wald(fit: OlsFit, names: Sequence[str]):
    """Wald statistic and chi-square p-value for ``coef[names] == 0``."""
    idx = [fit.names.index(nm) for nm in names]
    b = fit.coefficients[idx]
    V = fit.vcov[np.ix_(idx, idx)]
    try:
        stat = float(b @ np.linalg.solve(V, b))
    except np.linalg.LinAlgError:
        stat = float(b @ np.linalg.pinv(V) @ b)
    return stat, float(chi2.sf(stat, len(idx)))


# ---------------------------------------------------------------- probit

def probit_loglik(beta, y, X) -> float:
    q = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    return float(np.sum(log_ndtr(q * (X @ beta))))


def _mills(z):
    # phi(z) / Phi(z), stable in the lower tail
    return np.exp(-0.5 * z * z - 0.5 * math.log(2.0 * math.pi) - log_ndtr(z))


@dataclass(frozen=True)
class ProbitFit:
    coefficients: np.ndarray
    loglik_trace: tuple
    converged: bool
    iterations: int
    separated: bool = False
    gradient: Optional[np.ndarray] = field(default=None, repr=False)
    kept: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def predict(self, design) -> np.ndarray:
        X = np.asarray(design, dtype=np.float64)
        if self.kept is not None:
            X = X[:, self.kept]
        return ndtr(X @ self.coefficients)


def probit_fit(dtilde, design, max_iter: int = 100, grad_tol: float = 1e-8,
               ll_tol: float = 1e-10, max_halvings: int = 60) -> ProbitFit:
    """Probit maximum likelihood by Newton-Raphson with step-halving."""
    y = np.asarray(dtilde, dtype=np.float64).reshape(-1)
    X = np.asarray(design, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("probit outcome must be 0/1")
    if y.min() == y.max():
        raise ValueError("probit needs both classes present")
    kept = independent_columns(X)
    if kept.size < X.shape[1]:
        warnings.warn("dropped collinear design column(s) in probit", RuntimeWarning)
    X = X[:, kept]
    q = 2.0 * y - 1.0
    beta = np.zeros(X.shape[1])
    ll = probit_loglik(beta, y, X)
    trace = [ll]
    converged = False
    separated = False
    for _ in range(max_iter):
        z = q * (X @ beta)
        lam = _mills(z)
        grad = X.T @ (q * lam)
        if np.max(np.abs(grad)) < grad_tol:
            converged = True
            break
        w = lam * (lam + z)
        H = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        for _ in range(max_halvings):
            cand = beta + t * step
            ll_new = probit_loglik(cand, y, X)
            if ll_new >= ll:
                break
            t /= 2.0
        else:
            # no ascent possible along the Newton direction
            converged = bool(np.max(np.abs(grad)) < 1e-6)
            break
        beta = cand
        delta = ll_new - ll
        ll = ll_new
        trace.append(ll)
        fitted = ndtr(q * (X @ beta))
        if np.max(np.abs(beta)) > 1e3 or fitted.min() > 1.0 - 1e-8:
            separated = True
            break
        if delta < ll_tol:
            converged = True
            break
    # a vanishing gradient can also mean every unit is classified perfectly
    if not separated and ndtr(q * (X @ beta)).min() > 1.0 - 1e-6:
        separated = True
    if separated:
        warnings.warn("perfect separation: probit coefficients diverge", RuntimeWarning)
    elif not converged:
        warnings.warn("probit did not converge", RuntimeWarning)
    z = q * (X @ beta)
    grad = X.T @ (q * _mills(z))
    return ProbitFit(beta, tuple(trace), converged and not separated, len(trace) - 1, separated,
                     grad, kept)


# ---------------------------------------------------------------- matching

def _nearest(p_query, p_pool):
    """Index into ``p_pool`` of each query's nearest score; ties to lower index."""
    order = np.lexsort((np.arange(p_pool.size), p_pool))
    sp = p_pool[order]
    # first position of each distinct score holds its lowest row index
    first = np.concatenate(([True], sp[1:] != sp[:-1]))
    u = sp[first]
    u_idx = order[first]
    pos = np.searchsorted(u, p_query)
    lo = np.clip(pos - 1, 0, u.size - 1)
    hi = np.clip(pos, 0, u.size - 1)
    d_lo = np.abs(p_query - u[lo])
    d_hi = np.abs(u[hi] - p_query)
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (u_idx[hi] < u_idx[lo]))
    return np.where(pick_hi, u_idx[hi], u_idx[lo])


def psm_ate(y, dtilde, p_scores) -> float:
    """One-to-one matching with replacement in both directions (ATE)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    dt = np.asarray(dtilde).reshape(-1).astype(bool)
    p = np.asarray(p_scores, dtype=np.float64).reshape(-1)
    if not (y.size == dt.size == p.size):
        raise ValueError("inputs differ in length")
    t_idx = np.flatnonzero(dt)
    c_idx = np.flatnonzero(~dt)
    if t_idx.size == 0 or c_idx.size == 0:
        raise ValueError("both treatment arms must be present")
    y1 = y.copy()
    y0 = y.copy()
    y0[t_idx] = y[c_idx[_nearest(p[t_idx], p[c_idx])]]
    y1[c_idx] = y[t_idx[_nearest(p[c_idx], p[t_idx])]]
    return float(np.mean(y1 - y0))


@dataclass(frozen=True)
class PsmBootstrap:
    ate: float
    se: float
    p_value: float
    replicates: np.ndarray = field(repr=False)
    n_redrawn: int = 0


def bootstrap_psm(y, dtilde, design, B: int = 2000, seed: int = 0,
                  ate: Optional[float] = None) -> PsmBootstrap:
    """Bootstrap SE of the matching ATE, refitting the probit per replicate."""
    if B < 2:
        raise ValueError("B must be at least 2")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    dt = np.asarray(dtilde).reshape(-1).astype(np.float64)
    X = np.asarray(design, dtype=np.float64)
    n = y.size
    if ate is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ate = psm_ate(y, dt, probit_fit(dt, X).predict(X))
    reps = np.empty(B)
    redrawn = 0
    streams = np.random.SeedSequence(int(seed)).spawn(B)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for b, ss in enumerate(streams):
            rng = np.random.default_rng(ss)
            while True:
                idx = rng.integers(0, n, size=n)
                db = dt[idx]
                if 0 < db.sum() < n:
                    break
                redrawn += 1
            Xb = X[idx]
            fit = probit_fit(db, Xb)
            reps[b] = psm_ate(y[idx], db, fit.predict(Xb))
    if redrawn:
        warnings.warn(f"{redrawn} single-arm bootstrap draw(s) redrawn", RuntimeWarning)
    se = float(np.std(reps, ddof=1))
    return PsmBootstrap(float(ate), se, two_sided_p(ate, se), reps, redrawn)

"""Synthetic survey with known ground truth.

Population units draw demand covariates X, personal covariates W and an
unobserved taste V ~ N(0, 1). The discount depends on X only::

    D = clip(d_intercept + X @ d_coef + d_noise * eps, min_discount, max_discount)

Buying follows a single-threshold rule, so selection is monotone in the
discount path by path::

    S(d) = 1{alpha(X, W) + sel_jump * 1{d > 0} + sel_slope * d + V >= 0}

and the demand shift has Pr[Y(d) = 1 | X, W, V] = q(X, W) * (1 + lam * tanh(V)) * d,
so Y(0) = 0. V drives both buying and the outcome; conditioning on S = 1
therefore opens a collider path unless the sample is cut to always buyers.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from scipy.special import ndtr

from ._seeds import derive_seed
from .data import Dataset, TreatmentSpec, binarize_treatment, filter_always_buyers
from .dml import NuisanceEstimates

__all__ = [
    "DgpConfig",
    "Simulation",
    "OracleTruth",
    "McStudy",
    "default_config",
    "load_config",
    "simulate",
    "oracle_truth",
    "oracle_nuisances",
    "always_buyer_share",
    "monte_carlo_study",
    "simulate_predictive",
    "ESTIMATORS",
]

MIN_OBSERVED = 100
_VEC_FIELDS = ("d_coef", "sel_x", "sel_w", "q_x", "q_w")


@dataclass(frozen=True)
class DgpConfig:
    """Simulation parameters; vectors shorter than their block are zero-padded."""

    n: int = 10000
    p_x: int = 6
    p_x_binary: int = 2
    p_w: int = 3
    max_discount: float = 0.7
    min_discount: float = 0.01
    binarize_threshold: float = 0.3
    d_intercept: float = 0.29
    d_coef: tuple = (0.06, 0.0, 0.04, 0.0, 0.03, 0.0)
    d_noise: float = 0.165
    sel_intercept: float = -0.6
    sel_x: tuple = (0.3, 0.2, 0.0, 0.0, 0.0, 0.0)
    sel_w: tuple = (0.25, 0.0, 0.0)
    sel_slope: float = 2.95
    sel_jump: float = 0.0
    q_intercept: float = 0.033
    q_x: tuple = (0.067, 0.0, 0.034, 0.0, 0.0, 0.0)
    q_w: tuple = (0.024, 0.0, 0.0)
    v_outcome_loading: float = 0.6
    upsell_intercept: float = 0.1
    upsell_slope: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in _VEC_FIELDS:
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n < 1 or self.p_x < 1 or self.p_w < 0:
            raise ValueError("n and p_x must be positive, p_w non-negative")
        if not 0 <= self.p_x_binary <= self.p_x:
            raise ValueError("p_x_binary must lie in [0, p_x]")
        if not 0.0 < self.min_discount < self.max_discount <= 1.0:
            raise ValueError("need 0 < min_discount < max_discount <= 1")
        if not self.min_discount < self.binarize_threshold <= self.max_discount:
            raise ValueError("binarize_threshold must lie in (min_discount, max_discount]")
        if self.d_noise <= 0:
            raise ValueError("d_noise must be positive")
        if self.sel_slope < 0 or self.sel_jump < 0:
            raise ValueError("selection must be weakly increasing in the discount")
        for name, size in (("d_coef", self.p_x), ("sel_x", self.p_x), ("q_x", self.p_x),
                           ("sel_w", self.p_w), ("q_w", self.p_w)):
            if len(getattr(self, name)) > size:
                raise ValueError(f"{name} has more entries than columns")
        q_min = self.q_intercept + sum(min(c, 0.0) for c in self.q_x + self.q_w)
        q_max = self.q_intercept + sum(max(c, 0.0) for c in self.q_x + self.q_w)
        if q_min < 0:
            raise ValueError("q(X, W) must be non-negative")
        if q_max * (1.0 + abs(self.v_outcome_loading)) * self.max_discount > 1.0:
            raise ValueError("outcome probabilities would exceed one")
        for v in (self.upsell_intercept, self.upsell_intercept + self.upsell_slope * self.max_discount):
            if not 0.0 <= v <= 1.0:
                raise ValueError("upselling probability outside [0, 1]")

    def vec(self, name: str) -> np.ndarray:
        size = self.p_w if name.endswith("_w") else self.p_x
        out = np.zeros(size)
        vals = getattr(self, name)
        out[: len(vals)] = vals
        return out

    @property
    def treatment_spec(self) -> TreatmentSpec:
        return TreatmentSpec(self.max_discount, self.binarize_threshold)

    # ---- key=value text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _VEC_FIELDS:
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_mapping(cls, values: dict) -> "DgpConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            if key in _VEC_FIELDS:
                kw[key] = tuple(float(x) for x in str(raw).split(",") if x.strip()) \
                    if not isinstance(raw, (tuple, list)) else tuple(raw)
            elif kinds[key] in ("int", int):
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        return cls(**kw)


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> DgpConfig:
    return DgpConfig.from_mapping(parse_key_values(Path(path).read_text(encoding="utf-8")))


def default_config(**overrides) -> DgpConfig:
    return replace(DgpConfig(), **overrides)


# ---------------------------------------------------------------- model pieces

def _index_parts(cfg: DgpConfig, X, W):
    g = cfg.d_intercept + X @ cfg.vec("d_coef")
    alpha = cfg.sel_intercept + X @ cfg.vec("sel_x") + W @ cfg.vec("sel_w")
    q = cfg.q_intercept + (X > 0) @ cfg.vec("q_x") + (W > 0) @ cfg.vec("q_w")
    return g, alpha, q


def _draw_covariates(cfg: DgpConfig, n: int, rng: np.random.Generator):
    n_cont = cfg.p_x - cfg.p_x_binary
    X = np.empty((n, cfg.p_x))
    X[:, :n_cont] = rng.standard_normal((n, n_cont))
    X[:, n_cont:] = (rng.random((n, cfg.p_x_binary)) < 0.5).astype(np.float64)
    W = rng.standard_normal((n, cfg.p_w))
    return X, W


def _discount(cfg: DgpConfig, g, eps):
    return np.clip(g + cfg.d_noise * eps, cfg.min_discount, cfg.max_discount)


def _selects(cfg: DgpConfig, alpha, d, v):
    jump = np.where(np.asarray(d) > 0, cfg.sel_jump, 0.0)
    return (alpha + jump + cfg.sel_slope * d + v >= 0).astype(np.float64)


# T(a) = E[tanh(V) 1{V >= a}] for V ~ N(0, 1), tabulated once on a fine grid
_V_GRID = np.linspace(-9.0, 9.0, 18001)
_DENS = np.tanh(_V_GRID) * np.exp(-0.5 * _V_GRID ** 2) / math.sqrt(2 * math.pi)
_HEAD = cumulative_trapezoid(_DENS, _V_GRID, initial=0.0)
_TAIL = _HEAD[-1] - _HEAD


def _tanh_tail(a):
    return np.interp(a, _V_GRID, _TAIL, left=0.0, right=0.0)


def outcome_multiplier(cfg: DgpConfig, alpha):
    """E[1 + lam * tanh(V) | V >= -alpha], the always-buyer outcome loading."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if cfg.v_outcome_loading == 0.0:
        return np.ones_like(alpha)
    p = ndtr(alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = 1.0 + cfg.v_outcome_loading * _tanh_tail(-alpha) / p
    return np.where(p > 0, m, 1.0)


# ---------------------------------------------------------------- simulate

@dataclass(frozen=True)
class Simulation:
    observed: Dataset
    latent: pd.DataFrame = field(repr=False)
    config: DgpConfig = field(repr=False)


def simulate(cfg: DgpConfig, seed: Optional[int] = None) -> Simulation:
    """Draw a population of ``cfg.n`` units and keep the buyers (S = 1).

    The latent table covers every unit with ``latent_``-prefixed columns.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(derive_seed(seed, "simulate"))
    n = cfg.n
    X, W = _draw_covariates(cfg, n, rng)
    v = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    u_y = rng.random(n)
    u_up = rng.random(n)
    g, alpha, q = _index_parts(cfg, X, W)
    d = _discount(cfg, g, eps)
    s0 = _selects(cfg, alpha, 0.0, v)
    s = _selects(cfg, alpha, d, v)
    mult = 1.0 + cfg.v_outcome_loading * np.tanh(v)
    p_y = np.minimum(1.0, q * mult * d)
    y1 = (u_y < p_y).astype(np.float64)
    up = (u_up < cfg.upsell_intercept + cfg.upsell_slope * d).astype(np.float64)
    obs = np.flatnonzero(s == 1)
    if obs.size < MIN_OBSERVED:
        raise ValueError(f"configuration yields only {obs.size} buyers (< {MIN_OBSERVED})")
    n_cont = cfg.p_x - cfg.p_x_binary
    x_names = tuple(f"x{j}" for j in range(cfg.p_x))
    w_names = tuple(f"w{j}" for j in range(cfg.p_w))
    x_kinds = ("continuous",) * n_cont + ("binary",) * cfg.p_x_binary
    ds = Dataset(
        y=y1[obs], d=d[obs], s0=s0[obs], X=X[obs], W=W[obs],
        x_names=x_names, w_names=w_names, x_kinds=x_kinds,
        w_kinds=("continuous",) * cfg.p_w, upselling=up[obs], provenance="simulated",
    )
    latent = {"latent_id": np.arange(n), "latent_v": v, "latent_eps": eps,
              "latent_d": d, "latent_s0": s0, "latent_s": s,
              "latent_y0": np.zeros(n), "latent_y": y1, "latent_py": p_y,
              "latent_q": q, "latent_alpha": alpha, "latent_g": g}
    for j, name in enumerate(x_names):
        latent[f"latent_{name}"] = X[:, j]
    for j, name in enumerate(w_names):
        latent[f"latent_{name}"] = W[:, j]
    return Simulation(ds, pd.DataFrame(latent), cfg)


def selection_on_grid(cfg: DgpConfig, latent: pd.DataFrame, grid) -> np.ndarray:
    """S(d) for every latent unit (rows) and discount on ``grid`` (columns)."""
    alpha = latent["latent_alpha"].to_numpy()
    v = latent["latent_v"].to_numpy()
    return np.column_stack([_selects(cfg, alpha, float(d), v) for d in grid])


# ---------------------------------------------------------------- oracle

@dataclass(frozen=True)
class OracleTruth:
    theta_ab: float
    delta_ab_binary: float
    monotonicity_slope: float
    always_buyer_share: float
    computed_by: str
    theta_se: float = 0.0
    delta_se: float = 0.0
    slope_se: float = 0.0
    share_se: float = 0.0


def _ratio_mean(num, den):
    """Ratio of means with its delta-method standard error."""
    m = den.mean()
    r = num.mean() / m
    resid = (num - r * den) / m
    return float(r), float(resid.std(ddof=1) / math.sqrt(num.size))


def _arm_means(cfg: DgpConfig, g):
    """E[D | D >= t, X], E[D | D < t, X] and Pr[D >= t | X] for the clipped normal."""
    s = cfg.d_noise
    lo, hi, t = cfg.min_discount, cfg.max_discount, cfg.binarize_threshold
    za, zt, zh = (lo - g) / s, (t - g) / s, (hi - g) / s
    phi = lambda z: np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)  # noqa: E731

    def partial(a, b):
        # E[Z 1{a < Z < b}] for Z ~ N(g, s^2), bounds in standard units
        return g * (ndtr(b) - ndtr(a)) + s * (phi(a) - phi(b))

    p_hi = 1.0 - ndtr(zt)
    p_lo = ndtr(zt)
    if t >= hi:
        upper = np.full_like(g, hi)
        p_hi = 1.0 - ndtr(zh)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            upper = (partial(zt, zh) + hi * (1.0 - ndtr(zh))) / p_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = (lo * ndtr(za) + partial(za, zt)) / p_lo
    return upper, lower, p_hi


def always_buyer_share(cfg: DgpConfig, R: int = 200000, seed: int = 0):
    """Pr[S(0) = 1 | S = 1] by Monte Carlo over (X, W, D) with V integrated out."""
    rng = np.random.default_rng(derive_seed(seed, "share"))
    X, W = _draw_covariates(cfg, R, rng)
    g, alpha, _ = _index_parts(cfg, X, W)
    d = _discount(cfg, g, rng.standard_normal(R))
    jump = np.where(d > 0, cfg.sel_jump, 0.0)
    return _ratio_mean(ndtr(alpha), ndtr(alpha + jump + cfg.sel_slope * d))


def oracle_truth(cfg: DgpConfig, R: int = 200000, seed: int = 0) -> OracleTruth:
    """Estimands with V integrated out exactly and (X, W, D) by R draws."""
    rng = np.random.default_rng(derive_seed(seed, "oracle"))
    X, W = _draw_covariates(cfg, R, rng)
    g, alpha, q = _index_parts(cfg, X, W)
    d = _discount(cfg, g, rng.standard_normal(R))
    p_ab = ndtr(alpha)
    cape = q * outcome_multiplier(cfg, alpha)
    constant = (cfg.v_outcome_loading == 0.0
                and not any(cfg.q_x) and not any(cfg.q_w))
    if constant:
        theta, theta_se = float(cfg.q_intercept), 0.0
    else:
        theta, theta_se = _ratio_mean(p_ab * cape, p_ab)
    upper, lower, _ = _arm_means(cfg, g)
    delta, delta_se = _ratio_mean(p_ab * cape * (upper - lower), p_ab)
    # slope of Pr[S(0) = 0 | S = 1, X, W, d] in d, averaged over buyers
    jump = np.where(d > 0, cfg.sel_jump, 0.0)
    a1 = alpha + jump + cfg.sel_slope * d
    p_buy = ndtr(a1)
    dens = np.exp(-0.5 * a1 * a1) / math.sqrt(2 * math.pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        deriv = np.where(p_buy > 0, p_ab * cfg.sel_slope * dens / p_buy ** 2, 0.0)
    slope, slope_se = _ratio_mean(p_buy * deriv, p_buy)
    share, share_se = _ratio_mean(p_ab, p_buy)
    how = "analytic" if constant else f"monte-carlo with R={R} draws"
    return OracleTruth(theta, delta, slope, share, how, theta_se, delta_se, slope_se, share_se)


def oracle_nuisances(cfg: DgpConfig, ds: Dataset) -> NuisanceEstimates:
    """True mu0, mu1, p1 for the rows of an always-buyer sample from ``cfg``."""
    g, alpha, q = _index_parts(cfg, ds.X, ds.W)
    cape = q * outcome_multiplier(cfg, alpha)
    upper, lower, p1 = _arm_means(cfg, g)
    return NuisanceEstimates(cape * lower, cape * upper,
                             np.clip(p1, 1e-6, 1 - 1e-6), np.zeros(ds.n, dtype=np.int64))


# ---------------------------------------------------------------- predictive DGP

def simulate_predictive(n: int = 4000, p_x: int = 10, p_w: int = 5, signal: float = 1.5,
                        seed: int = 0) -> Dataset:
    """Survey-shaped data whose outcome depends on ``x0`` only (``signal=0``: pure noise)."""
    rng = np.random.default_rng(derive_seed(seed, "predictive"))
    X = rng.standard_normal((n, p_x))
    W = rng.standard_normal((n, p_w))
    d = rng.uniform(0.01, 0.7, n)
    y = (rng.random(n) < ndtr(signal * X[:, 0])).astype(np.float64)
    s0 = (rng.random(n) < 0.5).astype(np.float64)
    up = (rng.random(n) < 0.5).astype(np.float64)
    return Dataset(y=y, d=d, s0=s0, X=X, W=W,
                   x_names=tuple(f"x{j}" for j in range(p_x)),
                   w_names=tuple(f"w{j}" for j in range(p_w)),
                   upselling=up, provenance="simulated")


# ---------------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class McStudy:
    estimator: str
    truth: float
    bias: float
    rmse: float
    coverage: float
    mean_se: float
    mc_se: float
    n_failed: int
    records: pd.DataFrame = field(repr=False)


def _est_cf_ape(sim: Simulation, seed: int, opts: dict):
    from .causal_forest import CausalForestParams, causal_forest_ape
    from .forest import ForestParams
    ab = filter_always_buyers(sim.observed)
    Xc, _ = ab.controls(include_w=True)
    trees = opts.get("trees", 500)
    params = CausalForestParams(n_trees=trees, seed=seed,
                                nuisance=ForestParams(n_trees=opts.get("nuisance_trees", trees)))
    _, _, ape = causal_forest_ape(Xc, ab.y, ab.d, params, n_jobs=opts.get("threads", 1))
    return ape.theta, ape.se, ab.n, 0


def _est_dml(sim: Simulation, seed: int, opts: dict):
    from .dml import dml_ate
    from .forest import ForestParams
    ab = filter_always_buyers(sim.observed)
    Xc, _ = ab.controls(include_w=True)
    dt = binarize_treatment(ab.d, sim.config.treatment_spec)
    res, *_ = dml_ate(Xc, ab.y, dt, k_folds=opts.get("folds", 3),
                      threshold=opts.get("trim", 0.01), seed=seed,
                      params=ForestParams(n_trees=opts.get("trees", 300)),
                      n_jobs=opts.get("threads", 1))
    return res.ate, res.se, res.n_used, res.n_trimmed


def _est_dml_oracle(sim: Simulation, seed: int, opts: dict):
    from .dml import dml_ate
    ab = filter_always_buyers(sim.observed)
    dt = binarize_treatment(ab.d, sim.config.treatment_spec)
    nui = oracle_nuisances(sim.config, ab)
    res, *_ = dml_ate(None, ab.y, dt, threshold=opts.get("trim", 0.01), nuisances=nui)
    return res.ate, res.se, res.n_used, res.n_trimmed


def _est_ols_naive(sim: Simulation, seed: int, opts: dict):
    from .benchmarks import ols
    ds = sim.observed
    fit = ols(ds.y, np.column_stack([np.ones(ds.n), ds.d]), ["const", "d"])
    r = fit.row("d")
    return r["effect"], r["se"], ds.n, 0


def _est_ols(sim: Simulation, seed: int, opts: dict):
    from .benchmarks import ols
    ab = filter_always_buyers(sim.observed)
    Xc, names = ab.controls(include_w=True)
    fit = ols(ab.y, np.column_stack([np.ones(ab.n), ab.d, Xc]), ["const", "d"] + names)
    r = fit.row("d")
    return r["effect"], r["se"], ab.n, 0


ESTIMATORS: dict = {
    "cf_ape": (_est_cf_ape, "theta_ab_d"),
    "dml_ate": (_est_dml, "delta_ab_binary"),
    "dml_oracle": (_est_dml_oracle, "delta_ab_binary"),
    "ols": (_est_ols, "theta_ab_d"),
    "ols_naive": (_est_ols_naive, "theta_ab_d"),
}


def _truth_for(kind: str, truth: OracleTruth) -> float:
    return truth.theta_ab if kind == "theta_ab_d" else truth.delta_ab_binary


def monte_carlo_study(cfg: DgpConfig, reps: int, estimator: Union[str, Callable] = "cf_ape",
                      seed: int = 0, truth: Optional[OracleTruth] = None,
                      options: Optional[dict] = None, n_jobs: int = 1,
                      truth_value: Optional[float] = None) -> McStudy:
    """Simulate, filter and estimate ``reps`` times; summarize against the oracle.

    ``estimator`` is a key of ``ESTIMATORS`` or a callable
    ``(simulation, seed, options) -> (estimate, se, n_used, n_trimmed)``; a
    callable needs ``truth_value``.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    opts = dict(options or {})
    if callable(estimator):
        fn, name = estimator, getattr(estimator, "__name__", "custom")
        if truth_value is None:
            raise ValueError("a custom estimator needs truth_value")
        target = float(truth_value)
    else:
        if estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {estimator!r}; choose from {sorted(ESTIMATORS)}")
        fn, kind = ESTIMATORS[estimator]
        name = estimator
        if truth_value is not None:
            target = float(truth_value)
        else:
            truth = truth or oracle_truth(cfg, seed=seed)
            target = _truth_for(kind, truth)

    def one(r):
        rep_seed = derive_seed(seed, "rep", r)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sim = simulate(cfg, seed=rep_seed)
                est, se, n_used, n_trim = fn(sim, derive_seed(rep_seed, "estimate"), opts)
            return {"rep": r, "seed": rep_seed, "estimate": float(est), "se": float(se),
                    "n_used": int(n_used), "n_trimmed": int(n_trim), "error": ""}
        except Exception as exc:  # recorded and excluded
            return {"rep": r, "seed": rep_seed, "estimate": np.nan, "se": np.nan,
                    "n_used": 0, "n_trimmed": 0, "error": f"{type(exc).__name__}: {exc}"}

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(one, range(reps)))
    else:
        rows = [one(r) for r in range(reps)]
    rec = pd.DataFrame(rows)
    ok = rec["error"] == ""
    est = rec.loc[ok, "estimate"].to_numpy()
    se = rec.loc[ok, "se"].to_numpy()
    if est.size == 0:
        raise RuntimeError("every Monte Carlo replication failed")
    covered = np.abs(est - target) <= 1.959963984540054 * se
    rec["covered"] = False
    rec.loc[ok, "covered"] = covered
    err = est - target
    mc_se = float(est.std(ddof=1) / math.sqrt(est.size)) if est.size > 1 else float("nan")
    return McStudy(name, target, float(err.mean()), float(np.sqrt(np.mean(err ** 2))),
                   float(covered.mean()), float(se.mean()), mc_se, int((~ok).sum()), rec)

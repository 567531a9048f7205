"""Command-line interface.

Every command writes its outputs plus ``manifest.txt`` to ``--out``. The
manifest lists the fully resolved settings as ``key=value`` lines and can be
passed back through ``--config`` to reproduce the run byte for byte.
Settings resolve as defaults, then flags, then the config file.

Exit codes: 0 success, 2 invalid input, 3 an estimator failed (partial
results are still written).
"""
from __future__ import annotations

import argparse
import sys
import traceback
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._seeds import derive_seed
from .benchmarks import bootstrap_psm, ols, probit_fit, psm_ate
from .causal_forest import CausalForestParams, causal_forest_ape, estimate_cape, two_sided_p
from .data import Dataset, TreatmentSpec, binarize_treatment, load_survey, write_schema
from .diagnostics import (
    MULTIPLICITY_NOTE,
    blp_heterogeneity,
    cape_distribution,
    independence_wald,
    monotonicity_tests,
    predictive_accuracy,
)
from .dml import dml_ate, propensity_histogram
from .forest import ForestParams, fit_forest, variable_importance
from .report import (
    ResultRecord,
    fmt,
    read_manifest,
    write_histogram,
    write_manifest,
    write_records,
    write_table,
)
from .simulator import ESTIMATORS, DgpConfig, monte_carlo_study, oracle_truth, simulate

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
COMMANDS = ("simulate", "estimate", "diagnose", "predict", "heterogeneity", "mc-study")
SE_NOTE = ("conditional-effect SEs: between-group variance of half-sample tree groups, "
           "debiased by within-group variance, floored at zero")
UPSELL_DROP = ("class", "seat_capacity", "seat capacity", "seat_capacity_utilization")


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str = ""
    data: str = ""
    schema: str = ""
    seed: int = 0
    trees: int = 1000
    folds: int = 3
    trim: float = 0.01
    binarize_at: float = 0.3
    max_discount: float = 0.7
    bootstrap: int = 2000
    reps: int = 20
    estimator: str = "cf_ape"
    bins: int = 30
    split_rule: str = "ratio"
    tune: bool = False
    subsample_arms: bool = False
    blp_vars: str = ""
    oracle_draws: int = 200000
    dgp: Optional[DgpConfig] = None
    # not part of the manifest: results do not depend on them
    out: str = "."
    threads: int = 1

    @property
    def spec(self) -> TreatmentSpec:
        return TreatmentSpec(self.max_discount, self.binarize_at)

    def forest_params(self, seed_tag: str) -> ForestParams:
        return ForestParams(n_trees=self.trees, seed=derive_seed(self.seed, seed_tag))

    def cf_params(self, seed_tag: str) -> CausalForestParams:
        return CausalForestParams(n_trees=self.trees, seed=derive_seed(self.seed, seed_tag),
                                  split_rule=self.split_rule,
                                  nuisance=ForestParams(n_trees=self.trees),
                                  tune_nuisance=self.tune)

    def manifest(self) -> dict:
        out = {"version": __version__}
        for f in fields(self):
            if f.name in ("out", "threads", "dgp"):
                continue
            out[f.name] = getattr(self, f.name)
        if self.dgp is not None:
            for f in fields(self.dgp):
                v = getattr(self.dgp, f.name)
                out[f"dgp.{f.name}"] = ",".join(fmt(float(x)) for x in v) if isinstance(v, tuple) else v
        return out


_CASTS = {"int": int, "float": float, "str": str, "bool": None}


def _to_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise InputError(f"not a boolean: {v!r}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    kinds = {f.name: f.type for f in fields(RunConfig)}
    # flags over defaults
    for name in kinds:
        if name in ("command", "dgp"):
            continue
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    dgp_values = {}
    if getattr(args, "dgp", None):
        dgp_values.update(_read_kv(args.dgp))
    # config file over flags
    if args.config:
        for key, value in _read_kv(args.config).items():
            if key.startswith("dgp."):
                dgp_values[key[4:]] = value
            elif key in ("version", "command"):
                continue
            elif key in ("out", "threads"):
                continue
            elif key in kinds and key != "dgp":
                kind = kinds[key]
                try:
                    setattr(cfg, key, _to_bool(value) if kind == "bool" else _CASTS[kind](value))
                except ValueError as exc:
                    raise InputError(f"config key {key}: {exc}") from exc
            else:
                raise InputError(f"unknown config key {key!r}")
    if cfg.command in ("simulate", "mc-study"):
        try:
            dgp = DgpConfig.from_mapping(dgp_values)
        except ValueError as exc:
            raise InputError(f"simulation config: {exc}") from exc
        cfg.dgp = replace(dgp, seed=cfg.seed)
    _validate(cfg)
    return cfg


def _read_kv(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {path}")
    return read_manifest(p)


def _validate(cfg: RunConfig) -> None:
    if cfg.trees < 1:
        raise InputError("--trees must be positive")
    if cfg.folds < 2:
        raise InputError("--folds must be at least 2")
    if not 0.0 <= cfg.trim < 0.5:
        raise InputError("--trim must lie in [0, 0.5)")
    if cfg.bootstrap < 2:
        raise InputError("--bootstrap must be at least 2")
    if cfg.reps < 2:
        raise InputError("--reps must be at least 2")
    if cfg.estimator not in ESTIMATORS:
        raise InputError(f"--estimator must be one of {sorted(ESTIMATORS)}")
    if cfg.split_rule not in ("ratio", "gradient"):
        raise InputError("--split-rule must be 'ratio' or 'gradient'")
    try:
        cfg.spec
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _load(cfg: RunConfig) -> Dataset:
    if not cfg.data or not cfg.schema:
        raise InputError("--data and --schema are required")
    for p in (cfg.data, cfg.schema):
        if not Path(p).is_file():
            raise InputError(f"file not found: {p}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return load_survey(cfg.data, cfg.schema, cfg.spec)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _always_buyers(ds: Dataset) -> Dataset:
    ab = ds.subset(np.flatnonzero(ds.s0 == 1))
    if ab.n == 0:
        raise InputError("no always buyers (S(0) = 1) in the data")
    return ab


def _failed(method: str, exc: Exception, n: int = 0) -> ResultRecord:
    warnings.warn(f"{method} failed: {type(exc).__name__}: {exc}", RuntimeWarning)
    return ResultRecord(method, float("nan"), float("nan"), float("nan"), n)


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    try:
        sim = simulate(cfg.dgp, seed=cfg.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    sim.observed.to_csv(out / "survey.csv")
    write_schema(sim.observed.schema(), out / "survey.schema")
    sim.latent.to_csv(out / "latent.csv", index=False, float_format="%.17g", lineterminator="\n")
    cfg.dgp.save(out / "dgp.cfg")
    truth = oracle_truth(cfg.dgp, R=cfg.oracle_draws, seed=cfg.seed)
    write_table(out / "oracle.csv", ("quantity", "value", "mc_se", "computed_by"), [
        ("theta_ab", truth.theta_ab, truth.theta_se, truth.computed_by),
        ("delta_ab_binary", truth.delta_ab_binary, truth.delta_se, truth.computed_by),
        ("monotonicity_slope", truth.monotonicity_slope, truth.slope_se, truth.computed_by),
        ("always_buyer_share", truth.always_buyer_share, truth.share_se, truth.computed_by),
    ])
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    ds = _load(cfg)
    ab = _always_buyers(ds)
    X, names = ab.controls(include_w=True)
    records = []
    status = EXIT_OK
    try:
        _, _, ape = causal_forest_ape(X, ab.y, ab.d, cfg.cf_params("cf"), n_jobs=cfg.threads)
        records.append(ResultRecord("cf_ape", ape.theta, ape.se, ape.p_value, ape.n))
    except Exception as exc:
        records.append(_failed("cf_ape", exc, ab.n))
        status = EXIT_FAILED
    dt = None
    try:
        dt = binarize_treatment(ab.d, cfg.spec)
        res, nui, kept, _ = dml_ate(X, ab.y, dt, k_folds=cfg.folds, threshold=cfg.trim,
                                    seed=derive_seed(cfg.seed, "dml"),
                                    params=cfg.forest_params("dml"), n_jobs=cfg.threads)
        records.append(ResultRecord("dml_ate", res.ate, res.se, res.p_value, res.n_used,
                                    res.n_trimmed, res.threshold))
        edges, treated, control = propensity_histogram(nui.p1, dt)
        write_table(out / "propensity_histogram.csv", ("bin_lo", "bin_hi", "treated", "control"),
                    zip(edges[:-1], edges[1:], treated, control))
    except Exception as exc:
        records.append(_failed("dml_ate", exc, ab.n))
        status = EXIT_FAILED
    try:
        fit = ols(ab.y, np.column_stack([np.ones(ab.n), ab.d, X]), ["const", "d"] + names)
        r = fit.row("d")
        records.append(ResultRecord("ols", r["effect"], r["se"], r["p_value"], ab.n))
    except Exception as exc:
        records.append(_failed("ols", exc, ab.n))
        status = EXIT_FAILED
    try:
        if dt is None:
            dt = binarize_treatment(ab.d, cfg.spec)
        design = np.column_stack([np.ones(ab.n), X])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ate = psm_ate(ab.y, dt, probit_fit(dt, design).predict(design))
        boot = bootstrap_psm(ab.y, dt, design, B=cfg.bootstrap,
                             seed=derive_seed(cfg.seed, "psm"), ate=ate)
        records.append(ResultRecord("psm_ate", boot.ate, boot.se, boot.p_value, ab.n))
    except Exception as exc:
        records.append(_failed("psm_ate", exc, ab.n))
        status = EXIT_FAILED
    write_records(out / "estimates.csv", records,
                  footer=[f"always buyers: {ab.n} of {ds.n} survey rows",
                          f"binary treatment: discount >= {cfg.binarize_at}",
                          "controls: X and W"])
    return status


def cmd_diagnose(cfg: RunConfig, out: Path) -> int:
    ds = _load(cfg)
    status = EXIT_OK
    try:
        rep = monotonicity_tests(ds, cfg.cf_params("monotonicity"), cfg.forest_params("mono-dml"),
                                 k_folds=cfg.folds, trim=cfg.trim, spec=cfg.spec,
                                 seed=derive_seed(cfg.seed, "mono-folds"), bins=cfg.bins,
                                 n_jobs=cfg.threads)
        write_records(out / "monotonicity.csv", rep.records,
                      footer=[f"violation flagged: {int(rep.violation)}", SE_NOTE])
        dist = rep.distribution
        write_histogram(out / "change_histogram.csv", dist.edges, dist.counts)
        write_table(out / "change_shares.csv", ("quantity", "value"), [
            ("n", dist.n), ("share_positive", dist.share_positive),
            ("share_significant_10", dist.share_sig_10), ("share_significant_05", dist.share_sig_05),
        ])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    except Exception as exc:
        write_records(out / "monotonicity.csv", [_failed("monotonicity", exc, ds.n)])
        status = EXIT_FAILED
    try:
        ab = _always_buyers(ds)
        tab = independence_wald(ab)
        rows = list(tab.rows())
        rows.append(("summary_average_p", np.nan, np.nan, 0, tab.average_p_value,
                     f"{tab.n_significant_05} significant at 5%"))
        write_table(out / "independence.csv",
                    ("variable", "coefficient", "wald", "df", "p_value", "note"), rows)
        with open(out / "independence.csv", "a", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {MULTIPLICITY_NOTE}\n")
    except InputError:
        raise
    except Exception as exc:
        warnings.warn(f"independence test failed: {exc}", RuntimeWarning)
        status = EXIT_FAILED
    return status


def _predict_one(ds: Dataset, outcome: str, cfg: RunConfig, tag: str, out: Path):
    drop = UPSELL_DROP if outcome == "upselling" else ()
    res = predictive_accuracy(ds, outcome, cfg.forest_params(f"predict-{tag}"),
                              seed=derive_seed(cfg.seed, "predict", tag), drop=drop,
                              n_jobs=cfg.threads)
    res.importance.top(30).to_csv(out / f"importance_{tag}.csv")
    acc = res.accuracy
    se = float(np.sqrt(acc * (1 - acc) / res.n_test))
    p = two_sided_p(acc - 0.5, se) if se > 0 else float("nan")
    return ResultRecord(f"accuracy_{tag}", acc, se, p, res.n_test), (res.n_train, res.n_test)


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    ds = _load(cfg)
    outcomes = ["demand_shift", "additional_trip"]
    if ds.upselling is not None:
        outcomes.insert(1, "upselling")
    samples = [("", ds)]
    if cfg.subsample_arms:
        dt = binarize_treatment(ds.d, cfg.spec)
        samples += [("_high", ds.subset(np.flatnonzero(dt == 1))),
                    ("_low", ds.subset(np.flatnonzero(dt == 0)))]
    records, sizes = [], []
    status = EXIT_OK
    for suffix, sample in samples:
        for outcome in outcomes:
            tag = outcome + suffix
            try:
                rec, (ntr, nte) = _predict_one(sample, outcome, cfg, tag, out)
                records.append(rec)
                sizes.append((tag, ntr, nte, rec.effect))
            except Exception as exc:
                records.append(_failed(f"accuracy_{tag}", exc, sample.n))
                sizes.append((tag, 0, 0, float("nan")))
                status = EXIT_FAILED
    write_records(out / "predict.csv", records,
                  footer=["effect = held-out correct prediction rate on a balanced sample",
                          "p_value tests accuracy = 0.5"])
    write_table(out / "accuracy.csv", ("outcome", "n_train", "n_test", "accuracy"), sizes)
    return status


def cmd_heterogeneity(cfg: RunConfig, out: Path) -> int:
    ds = _load(cfg)
    ab = _always_buyers(ds)
    X, names = ab.controls(include_w=True)
    try:
        cf, scores, ape = causal_forest_ape(X, ab.y, ab.d, cfg.cf_params("cf"), n_jobs=cfg.threads)
    except Exception as exc:
        write_records(out / "heterogeneity.csv", [_failed("cf_ape", exc, ab.n)])
        return EXIT_FAILED
    records = [ResultRecord("cf_ape", ape.theta, ape.se, ape.p_value, ape.n)]
    cape = estimate_cape(cf, oob=True)
    dist = cape_distribution(cape, cfg.bins)
    write_histogram(out / "cape_histogram.csv", dist.edges, dist.counts)
    write_table(out / "cape_shares.csv", ("quantity", "value"), [
        ("n", dist.n), ("share_positive", dist.share_positive),
        ("share_significant_10", dist.share_sig_10), ("share_significant_05", dist.share_sig_05),
    ])
    ok = np.isfinite(cape.tau)
    Xr = cf.X_train[ok]
    f = fit_forest(Xr, cape.tau[ok], "regression", cfg.forest_params("cape-importance"),
                   feature_names=names, n_jobs=cfg.threads)
    variable_importance(f).top(30).to_csv(out / "cape_importance.csv")
    status = EXIT_OK
    kept = scores.kept
    rows = cf.rows[kept]
    s = scores.scores[kept]
    dt = binarize_treatment(ab.d[rows], cfg.spec)
    chosen = [v for v in cfg.blp_vars.split(",") if v] or list(ab.w_names)
    bases = {"binary": (np.column_stack([np.ones(s.size), dt]), ["const", "dtilde"])}
    try:
        cols = np.column_stack([ab.column(v)[rows] for v in chosen]) if chosen else np.zeros((s.size, 0))
    except KeyError as exc:
        raise InputError(f"unknown BLP variable: {exc}") from exc
    bases["characteristics"] = (np.column_stack([np.ones(s.size), cols]), ["const"] + chosen)
    for label, (B, bn) in bases.items():
        try:
            blp = blp_heterogeneity(s, B, bn)
            write_table(out / f"blp_{label}.csv", ("term", "coefficient", "se", "p_value"),
                        blp.rows())
            for nm, c, se, p in blp.rows():
                records.append(ResultRecord(f"blp_{label}:{nm}", c, se, p, blp.n))
        except Exception as exc:
            records.append(_failed(f"blp_{label}", exc, s.size))
            status = EXIT_FAILED
    write_records(out / "heterogeneity.csv", records, footer=[SE_NOTE, MULTIPLICITY_NOTE])
    return status


def cmd_mc_study(cfg: RunConfig, out: Path) -> int:
    truth = oracle_truth(cfg.dgp, R=cfg.oracle_draws, seed=cfg.seed)
    opts = {"trees": cfg.trees, "folds": cfg.folds, "trim": cfg.trim}
    try:
        study = monte_carlo_study(cfg.dgp, cfg.reps, cfg.estimator, seed=cfg.seed,
                                  truth=truth, options=opts, n_jobs=cfg.threads)
    except RuntimeError as exc:
        write_records(out / "mc_summary.csv", [_failed(cfg.estimator, exc)])
        return EXIT_FAILED
    write_table(out / "mc_study.csv",
                ("estimator", "truth", "bias", "rmse", "coverage", "mean_se", "mc_se", "n_failed"),
                [(study.estimator, study.truth, study.bias, study.rmse, study.coverage,
                  study.mean_se, study.mc_se, study.n_failed)])
    rec = study.records
    write_table(out / "mc_reps.csv", list(rec.columns), rec.itertuples(index=False))
    ok = rec["error"] == ""
    write_records(out / "mc_summary.csv", [ResultRecord(
        study.estimator, float(rec.loc[ok, "estimate"].mean()), study.mc_se, float("nan"),
        int(ok.sum()))], footer=[f"truth {fmt(study.truth)} ({truth.computed_by})"])
    return EXIT_OK if study.n_failed == 0 else EXIT_FAILED


HANDLERS = {
    "simulate": cmd_simulate, "estimate": cmd_estimate, "diagnose": cmd_diagnose,
    "predict": cmd_predict, "heterogeneity": cmd_heterogeneity, "mc-study": cmd_mc_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratcausal",
                                     description="Discount effects among always buyers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--data", help="survey CSV")
        p.add_argument("--schema", help="column schema file")
        p.add_argument("--config", help="key=value run config (overrides flags)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--trees", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--trim", type=float)
        p.add_argument("--binarize-at", dest="binarize_at", type=float)
        p.add_argument("--bootstrap", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--bins", type=int)
        p.add_argument("--split-rule", dest="split_rule", choices=("ratio", "gradient"))
        p.add_argument("--tune", action="store_const", const=True, default=None,
                       help="tune nuisance forests on out-of-bag error")
        if name in ("simulate", "mc-study"):
            p.add_argument("--dgp", help="simulation config (key=value)")
            p.add_argument("--oracle-draws", dest="oracle_draws", type=int)
        if name == "mc-study":
            p.add_argument("--reps", type=int)
            p.add_argument("--estimator", choices=sorted(ESTIMATORS))
        if name == "predict":
            p.add_argument("--subsample-arms", dest="subsample_arms", action="store_const",
                           const=True, default=None)
        if name == "heterogeneity":
            p.add_argument("--blp-vars", dest="blp_vars",
                           help="comma-separated covariates for the characteristics basis")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", cfg.manifest())
        status = HANDLERS[cfg.command](cfg, out)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        traceback.print_exc()
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return status


if __name__ == "__main__":
    sys.exit(main())

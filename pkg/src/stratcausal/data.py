"""Survey records, ingestion and sample-construction rules."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

__all__ = [
    "TreatmentSpec",
    "SurveyRecord",
    "SectionTable",
    "UtilizationResult",
    "Dataset",
    "ROLES",
    "parse_schema",
    "write_schema",
    "load_survey",
    "load_sections",
    "aggregate_trip_discount",
    "impute_utilization",
    "trip_features",
    "binarize_treatment",
    "filter_always_buyers",
    "train_test_split",
    "balance_binary_outcome",
]

ROLES = ("outcome", "treatment", "s0", "x", "w", "ignore", "upselling")
KINDS = ("continuous", "binary", "categorical")
REQUIRED_ROLES = ("outcome", "treatment", "s0")
ABSENT = ("", "NA")


@dataclass(frozen=True)
class TreatmentSpec:
    max_discount: float = 0.7
    binarize_threshold: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.binarize_threshold < self.max_discount <= 1.0:
            raise ValueError("need 0 < binarize_threshold < max_discount <= 1")


@dataclass(frozen=True)
class SurveyRecord:
    y_demand_shift: int
    d_discount: float
    s0_would_buy: int
    upselling: Optional[int]
    x_demand: np.ndarray
    w_personal: np.ndarray
    imputed_flag: int = 0
    imputed_share: float = 0.0

    @property
    def additional_trip(self) -> int:
        return 1 - self.s0_would_buy


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Column-oriented survey sample; every row has S = 1 by design.

    ``x_groups``/``w_groups`` name the source variable of each column so that
    one-hot blocks of a categorical can be tested jointly.
    """

    y: np.ndarray
    d: np.ndarray
    s0: np.ndarray
    X: np.ndarray
    W: np.ndarray
    x_names: tuple
    w_names: tuple
    x_kinds: tuple = ()
    w_kinds: tuple = ()
    x_groups: tuple = ()
    w_groups: tuple = ()
    upselling: Optional[np.ndarray] = None
    provenance: str = "ingested"
    n_rejected: int = 0

    def __post_init__(self):
        n = len(self.y)
        for name in ("y", "d", "s0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)).reshape(-1))
        for name, names in (("X", self.x_names), ("W", self.w_names)):
            m = _frozen(getattr(self, name))
            m = m.reshape(n, len(names))
            object.__setattr__(self, name, m)
        if self.upselling is not None:
            object.__setattr__(self, "upselling", _frozen(self.upselling).reshape(-1))
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "w_names", tuple(self.w_names))
        if not self.x_kinds:
            object.__setattr__(self, "x_kinds", tuple(_infer_kind(c) for c in self.X.T))
        if not self.w_kinds:
            object.__setattr__(self, "w_kinds", tuple(_infer_kind(c) for c in self.W.T))
        if not self.x_groups:
            object.__setattr__(self, "x_groups", self.x_names)
        if not self.w_groups:
            object.__setattr__(self, "w_groups", self.w_names)
        lengths = {len(self.d), len(self.s0), self.X.shape[0], self.W.shape[0]}
        if lengths != {n}:
            raise ValueError("dataset columns have different lengths")
        for arr in (self.y, self.d, self.s0, self.X, self.W):
            if not np.all(np.isfinite(arr)):
                raise ValueError("dataset contains absent or non-finite values")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def additional_trip(self) -> np.ndarray:
        return 1.0 - self.s0

    def outcome(self, name: str) -> np.ndarray:
        """Look up a binary outcome by name."""
        if name in ("y", "demand_shift"):
            return self.y
        if name in ("additional_trip", "1-s0"):
            return self.additional_trip
        if name == "s0":
            return self.s0
        if name == "upselling":
            if self.upselling is None:
                raise KeyError("dataset carries no upselling column")
            return self.upselling
        raise KeyError(f"unknown outcome {name!r}")

    def controls(self, include_w: bool = True):
        """Covariate matrix and names: X, optionally followed by W."""
        if not include_w:
            return np.array(self.X), list(self.x_names)
        return np.hstack([self.X, self.W]), list(self.x_names) + list(self.w_names)

    def column(self, name: str) -> np.ndarray:
        if name in ("d", "discount"):
            return self.d
        if name in self.x_names:
            return self.X[:, self.x_names.index(name)]
        if name in self.w_names:
            return self.W[:, self.w_names.index(name)]
        return self.outcome(name)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            y=self.y[idx], d=self.d[idx], s0=self.s0[idx],
            X=self.X[idx], W=self.W[idx],
            upselling=None if self.upselling is None else self.upselling[idx],
        )

    @property
    def records(self) -> Iterator[SurveyRecord]:
        flag_j = self.x_names.index("imputed_flag") if "imputed_flag" in self.x_names else None
        share_j = self.x_names.index("imputed_share") if "imputed_share" in self.x_names else None
        for i in range(self.n):
            yield SurveyRecord(
                int(self.y[i]), float(self.d[i]), int(self.s0[i]),
                None if self.upselling is None else int(self.upselling[i]),
                self.X[i], self.W[i],
                0 if flag_j is None else int(self.X[i, flag_j]),
                0.0 if share_j is None else float(self.X[i, share_j]),
            )

    def to_frame(self) -> pd.DataFrame:
        cols = {"y": self.y, "d": self.d, "s0": self.s0}
        if self.upselling is not None:
            cols["upselling"] = self.upselling
        for j, name in enumerate(self.x_names):
            cols[name] = self.X[:, j]
        for j, name in enumerate(self.w_names):
            cols[name] = self.W[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    def schema(self) -> dict:
        out = {"y": ("outcome", "binary"), "d": ("treatment", "continuous"),
               "s0": ("s0", "binary")}
        if self.upselling is not None:
            out["upselling"] = ("upselling", "binary")
        # one-hot columns are written out as plain indicators
        for name, kind in zip(self.x_names, self.x_kinds):
            out[name] = ("x", "binary" if kind == "categorical" else kind)
        for name, kind in zip(self.w_names, self.w_kinds):
            out[name] = ("w", "binary" if kind == "categorical" else kind)
        return out


def _infer_kind(col: np.ndarray) -> str:
    return "binary" if np.all((col == 0.0) | (col == 1.0)) else "continuous"


# ---------------------------------------------------------------- schema I/O

def parse_schema(source: Union[str, Path, Mapping]) -> dict:
    """Read a ``column = role[:kind]`` schema file into ``{column: (role, kind)}``."""
    if isinstance(source, Mapping):
        items = [(k, v if isinstance(v, str) else ":".join(x for x in v if x))
                 for k, v in source.items()]
    else:
        items = []
        for lineno, raw in enumerate(Path(source).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"schema line {lineno}: expected 'column = role'")
            key, value = line.split("=", 1)
            items.append((key.strip(), value.strip()))
    schema = {}
    for col, value in items:
        role, _, kind = value.partition(":")
        role, kind = role.strip().lower(), kind.strip().lower() or None
        if role not in ROLES:
            raise ValueError(f"column {col!r}: unknown role {role!r}")
        if kind is not None and kind not in KINDS:
            raise ValueError(f"column {col!r}: unknown kind {kind!r}")
        schema[col] = (role, kind)
    return schema


def write_schema(schema: Mapping, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for col, (role, kind) in schema.items():
            fh.write(f"{col} = {role}:{kind}\n" if kind else f"{col} = {role}\n")


# ----------------------------------------------------------------- ingestion

def _numeric(col: pd.Series, name: str) -> np.ndarray:
    # python float() parses correctly rounded, unlike the fast pandas path
    out = np.empty(len(col), dtype=np.float64)
    for i, raw in enumerate(col.tolist()):
        if raw in ABSENT:
            out[i] = np.nan
            continue
        try:
            out[i] = float(raw)
        except ValueError:
            raise ValueError(f"non-numeric value {raw!r} in column {name!r}") from None
        if np.isnan(out[i]):
            raise ValueError(f"non-numeric value {raw!r} in column {name!r}")
    return out


def load_survey(path, schema, spec: TreatmentSpec = TreatmentSpec()) -> Dataset:
    """Read a survey CSV with a header row.

    Rows with an absent outcome, treatment, S(0) or covariate, and rows with a
    zero discount, are rejected; the count lands in ``Dataset.n_rejected``.
    A discount outside [0, Q] is an error.
    """
    schema = parse_schema(schema)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing_cols = [c for c in schema if c not in frame.columns]
    if missing_cols:
        raise ValueError(f"schema names columns absent from the file: {missing_cols}")
    by_role = {}
    for col, (role, kind) in schema.items():
        by_role.setdefault(role, []).append((col, kind))
    for role in REQUIRED_ROLES:
        if len(by_role.get(role, [])) != 1:
            raise ValueError(f"schema must assign exactly one column the role {role!r}")
    if len(by_role.get("upselling", [])) > 1:
        raise ValueError("at most one upselling column")

    n = len(frame)
    keep = np.ones(n, dtype=bool)
    core = {}
    for role in REQUIRED_ROLES + ("upselling",):
        if role not in by_role:
            continue
        col = by_role[role][0][0]
        vals = _numeric(frame[col], col)
        keep &= ~np.isnan(vals)
        core[role] = vals
    d = core["treatment"]
    observed = ~np.isnan(d)
    if np.any(observed & ((d < 0) | (d > spec.max_discount))):
        bad = d[observed & ((d < 0) | (d > spec.max_discount))][0]
        raise ValueError(f"treatment {bad} outside (0, {spec.max_discount}]")
    keep &= ~(observed & (d == 0))
    for role in ("outcome", "s0", "upselling"):
        if role in core:
            v = core[role]
            if np.any(~np.isnan(v) & (v != 0) & (v != 1)):
                raise ValueError(f"column for role {role!r} must be binary")

    blocks = {"x": ([], [], [], []), "w": ([], [], [], [])}
    for role in ("x", "w"):
        cols, names, kinds, groups = blocks[role]
        for col, kind in by_role.get(role, []):
            raw = frame[col]
            absent = raw.isin(ABSENT).to_numpy()
            keep &= ~absent
            if kind == "categorical":
                levels = sorted(set(raw[~absent]), key=_level_key)
                for level in levels:
                    cols.append((raw == level).to_numpy(dtype=np.float64))
                    names.append(f"{col}={level}")
                    kinds.append("categorical")
                    groups.append(col)
            else:
                vals = _numeric(raw, col)
                cols.append(vals)
                names.append(col)
                kinds.append(kind or _infer_kind(vals[~np.isnan(vals)]))
                groups.append(col)

    def stack(role):
        cols = blocks[role][0]
        if not cols:
            return np.zeros((int(keep.sum()), 0))
        return np.column_stack(cols)[keep]

    ds = Dataset(
        y=core["outcome"][keep], d=d[keep], s0=core["s0"][keep],
        X=stack("x"), W=stack("w"),
        x_names=tuple(blocks["x"][1]), w_names=tuple(blocks["w"][1]),
        x_kinds=tuple(blocks["x"][2]), w_kinds=tuple(blocks["w"][2]),
        x_groups=tuple(blocks["x"][3]), w_groups=tuple(blocks["w"][3]),
        upselling=core["upselling"][keep] if "upselling" in core else None,
        provenance="ingested", n_rejected=int(n - keep.sum()),
    )
    if ds.n_rejected:
        warnings.warn(f"{ds.n_rejected} row(s) rejected during ingestion", UserWarning)
    return ds


def _level_key(level: str):
    try:
        return (0, float(level), level)
    except ValueError:
        return (1, 0.0, level)


# ---------------------------------------------------------------- sections

@dataclass(frozen=True)
class SectionTable:
    """Sections between adjacent stops of one trip; ``nan`` marks absent values."""

    distance: np.ndarray
    discount: np.ndarray
    utilization: np.ndarray

    def __post_init__(self):
        for name in ("distance", "discount", "utilization"):
            object.__setattr__(self, name, _frozen(getattr(self, name)).reshape(-1))
        if self.distance.size == 0:
            raise ValueError("a section table needs at least one section")
        if not (self.distance.size == self.discount.size == self.utilization.size):
            raise ValueError("section columns differ in length")
        if np.any(~(self.distance > 0)):
            raise ValueError("section distances must be strictly positive")

    @classmethod
    def from_rows(cls, rows: Sequence[tuple]) -> "SectionTable":
        """Build from ``(distance_km, discount[, utilization])`` tuples, ``None`` = absent."""
        padded = [tuple(r) + (None,) * (3 - len(r)) for r in rows]
        arr = np.array([[np.nan if v is None else v for v in r] for r in padded], dtype=float)
        if arr.size == 0:
            raise ValueError("a section table needs at least one section")
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return int(self.distance.size)


@dataclass(frozen=True)
class UtilizationResult:
    kept: bool
    utilization: float
    imputed_share: float
    filled: np.ndarray = field(repr=False)


def aggregate_trip_discount(sections: SectionTable) -> float:
    """Distance-weighted mean of the section discounts."""
    if len(sections) == 0:
        raise ValueError("empty section table")
    if np.any(np.isnan(sections.discount)):
        raise ValueError("every section needs a discount")
    w = sections.distance
    return float(np.dot(w, sections.discount) / np.sum(w))


def impute_utilization(sections: SectionTable, max_missing: float = 0.5) -> UtilizationResult:
    """Drop trips with more than half their utilizations absent, else mean-impute."""
    util = sections.utilization
    absent = np.isnan(util)
    share = float(absent.mean())
    if share > max_missing or absent.all():
        return UtilizationResult(False, float("nan"), share, util.copy())
    filled = util.copy()
    filled[absent] = util[~absent].mean()
    return UtilizationResult(True, float(filled.mean()), share, filled)


def load_sections(path) -> dict:
    """Read ``trip_id, section_index, distance_km, discount, utilization`` rows."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    need = ["trip_id", "section_index", "distance_km", "discount", "utilization"]
    missing = [c for c in need if c not in frame.columns]
    if missing:
        raise ValueError(f"section file lacks columns {missing}")
    frame = frame.assign(
        section_index=_numeric(frame["section_index"], "section_index"),
        distance_km=_numeric(frame["distance_km"], "distance_km"),
        discount=_numeric(frame["discount"], "discount"),
        utilization=_numeric(frame["utilization"], "utilization"),
    )
    tables = {}
    for trip, g in frame.groupby("trip_id", sort=True):
        g = g.sort_values("section_index")
        tables[trip] = SectionTable(g["distance_km"].to_numpy(), g["discount"].to_numpy(),
                                    g["utilization"].to_numpy())
    return tables


def trip_features(tables: Mapping) -> pd.DataFrame:
    """One row per kept trip: discount, utilization and imputation indicators."""
    rows = []
    for trip, tab in tables.items():
        res = impute_utilization(tab)
        if not res.kept:
            continue
        rows.append({
            "trip_id": trip,
            "discount": aggregate_trip_discount(tab),
            "utilization": res.utilization,
            "imputed_flag": int(res.imputed_share > 0),
            "imputed_share": res.imputed_share,
            "distance": float(tab.distance.sum()),
            "number_of_sections": len(tab),
        })
    cols = ["trip_id", "discount", "utilization", "imputed_flag", "imputed_share",
            "distance", "number_of_sections"]
    return pd.DataFrame(rows, columns=cols)


# ------------------------------------------------------------ sample rules

def binarize_treatment(d, spec: TreatmentSpec = TreatmentSpec()):
    """1 where the discount reaches the threshold (inclusive), else 0."""
    arr = np.asarray(d, dtype=np.float64)
    if np.any(~((arr > 0) & (arr <= spec.max_discount))):
        raise ValueError(f"discount outside (0, {spec.max_discount}]")
    out = (arr >= spec.binarize_threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def filter_always_buyers(ds: Dataset) -> Dataset:
    keep = np.flatnonzero(ds.s0 == 1)
    if keep.size == 0:
        warnings.warn("no always buyers in the sample", UserWarning)
    return ds.subset(keep)


def train_test_split(ds: Dataset, train_frac: float = 0.75, seed: int = 0):
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    if ds.n < 2:
        raise ValueError("need at least two rows to split")
    n_train = int(np.floor(ds.n * train_frac + 0.5))
    n_train = min(max(n_train, 1), ds.n - 1)
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def balance_binary_outcome(ds: Dataset, outcome: str = "y", seed: int = 0) -> Dataset:
    """Keep every minority-class row plus an equal-size uniform draw of the majority."""
    y = ds.outcome(outcome)
    ones = np.flatnonzero(y == 1)
    zeros = np.flatnonzero(y == 0)
    if ones.size == 0 or zeros.size == 0:
        raise ValueError(f"outcome {outcome!r} has a single class")
    minority, majority = (ones, zeros) if ones.size <= zeros.size else (zeros, ones)
    drawn = np.random.default_rng(seed).choice(majority, size=minority.size, replace=False)
    return ds.subset(np.sort(np.concatenate([minority, drawn])))

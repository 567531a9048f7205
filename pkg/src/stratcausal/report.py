"""Result records and deterministic report files."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = ["ResultRecord", "RECORD_FIELDS", "write_records", "read_records", "write_table",
           "write_histogram", "write_manifest", "read_manifest", "file_digest", "fmt"]

RECORD_FIELDS = ("method", "effect", "se", "p_value", "n", "n_trimmed", "threshold")


@dataclass(frozen=True)
class ResultRecord:
    method: str
    effect: float
    se: float
    p_value: float
    n: int
    n_trimmed: int = 0
    threshold: float = float("nan")

    def as_row(self) -> dict:
        return {k: fmt(v) for k, v in asdict(self).items()}


def fmt(v) -> str:
    """Shortest round-trip text for numbers; ``NA`` for absent values."""
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "NA"
        return repr(v)
    return str(v)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_records(path, records: Sequence[ResultRecord], footer: Sequence[str] = ()) -> Path:
    path = write_table(path, RECORD_FIELDS,
                       ([getattr(r, k) for k in RECORD_FIELDS] for r in records))
    if footer:
        with open(path, "a", encoding="utf-8", newline="") as fh:
            for line in footer:
                fh.write(f"# {line}\n")
    return path


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(rows):
        def num(s):
            return float("nan") if s == "NA" else float(s)
        out.append(ResultRecord(row["method"], num(row["effect"]), num(row["se"]),
                                num(row["p_value"]), int(row["n"]), int(row["n_trimmed"]),
                                num(row["threshold"])))
    return out


def write_histogram(path, edges, counts) -> Path:
    edges = np.asarray(edges, dtype=float)
    return write_table(path, ("bin_lo", "bin_hi", "count"),
                       zip(edges[:-1], edges[1:], np.asarray(counts, dtype=int)))


def write_manifest(path, entries: Mapping) -> Path:
    """``key=value`` lines in the given order; readable back as a config."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in entries.items():
            fh.write(f"{k}={fmt(v)}\n")
    return path


def read_manifest(path) -> dict:
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Two-sample data structures and CSV ingestion.

A trial sample ``(X, A, Y)`` and a design-weighted real-world sample
``(X, d[, A, Y])`` share one covariate schema. All containers are frozen
and hold read-only arrays so they can be shared between workers.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import (
    ArmEmpty,
    DimensionMismatch,
    InvalidOutcomeCode,
    InvalidTreatmentCode,
    MissingColumn,
    NonNumericCell,
    NonPositiveDesignWeight,
    SchemaError,
)

logger = logging.getLogger(__name__)


class OutcomeType(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


def _frozen(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _first_bad_row(mask: np.ndarray) -> int:
    """1-based index of the first True entry."""
    return int(np.flatnonzero(mask)[0]) + 1


@dataclass(frozen=True)
class CovariateSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n).strip() for n in self.names)
        if not names:
            raise SchemaError("covariate schema needs at least one column")
        if any(not n for n in names):
            raise SchemaError("covariate names must be non-empty")
        lowered = [n.lower() for n in names]
        if len(set(lowered)) != len(lowered):
            raise SchemaError(f"duplicate covariate names in {names}")
        object.__setattr__(self, "names", names)

    @property
    def p(self) -> int:
        return len(self.names)

    @classmethod
    def default(cls, p: int) -> "CovariateSchema":
        return cls(tuple(f"x{k + 1}" for k in range(p)))


@dataclass(frozen=True)
class TrialSample:
    """Randomized trial rows. ``a`` is stored as float 0/1."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    known_pi_a: Optional[float] = None

    def __post_init__(self):
        x = _frozen(self.x, 2, "trial x")
        a = _frozen(self.a, 1, "trial a")
        y = _frozen(self.y, 1, "trial y")
        n = x.shape[0]
        if a.shape[0] != n or y.shape[0] != n:
            raise DimensionMismatch(
                f"trial arrays disagree: x has {n} rows, a {a.shape[0]}, y {y.shape[0]}"
            )
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            row = _first_bad_row(bad)
            col = int(np.flatnonzero(~np.isfinite(x[row - 1]))[0])
            raise NonNumericCell(row, f"x[{col}]", str(x[row - 1, col]), "trial")
        bad = ~np.isfinite(y)
        if bad.any():
            row = _first_bad_row(bad)
            raise NonNumericCell(row, "y", str(y[row - 1]), "trial")
        bad = (a != 0.0) & (a != 1.0)
        if bad.any():
            row = _first_bad_row(bad)
            raise InvalidTreatmentCode(row, a[row - 1], "trial")
        if not (a == 1.0).any():
            raise ArmEmpty(1, "trial")
        if not (a == 0.0).any():
            raise ArmEmpty(0, "trial")
        if self.known_pi_a is not None:
            pi = float(self.known_pi_a)
            if not 0.0 < pi < 1.0:
                raise DimensionMismatch(f"known_pi_a must lie in (0, 1), got {pi}")
            object.__setattr__(self, "known_pi_a", pi)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "TrialSample":
        return TrialSample(self.x[idx], self.a[idx], self.y[idx], self.known_pi_a)


@dataclass(frozen=True)
class RweSample:
    """Real-world rows with design weights; ``a``/``y`` optional together."""

    x: np.ndarray
    d: np.ndarray
    a: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        x = _frozen(self.x, 2, "rwe x")
        d = _frozen(self.d, 1, "rwe d")
        m = x.shape[0]
        if d.shape[0] != m:
            raise DimensionMismatch(f"rwe x has {m} rows but d has {d.shape[0]}")
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            row = _first_bad_row(bad)
            col = int(np.flatnonzero(~np.isfinite(x[row - 1]))[0])
            raise NonNumericCell(row, f"x[{col}]", str(x[row - 1, col]), "rwe")
        bad = ~np.isfinite(d)
        if bad.any():
            row = _first_bad_row(bad)
            raise NonNumericCell(row, "d", str(d[row - 1]), "rwe")
        bad = d <= 0
        if bad.any():
            row = _first_bad_row(bad)
            raise NonPositiveDesignWeight(row, d[row - 1])
        if (self.a is None) != (self.y is None):
            raise DimensionMismatch("rwe a and y must be both present or both absent")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        if self.a is not None:
            a = _frozen(self.a, 1, "rwe a")
            y = _frozen(self.y, 1, "rwe y")
            if a.shape[0] != m or y.shape[0] != m:
                raise DimensionMismatch("rwe a/y length differs from x")
            bad = (a != 0.0) & (a != 1.0)
            if bad.any():
                row = _first_bad_row(bad)
                raise InvalidTreatmentCode(row, a[row - 1], "rwe")
            bad = ~np.isfinite(y)
            if bad.any():
                row = _first_bad_row(bad)
                raise NonNumericCell(row, "y", str(y[row - 1]), "rwe")
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def has_outcomes(self) -> bool:
        return self.y is not None

    def take(self, idx: np.ndarray) -> "RweSample":
        if self.has_outcomes:
            return RweSample(self.x[idx], self.d[idx], self.a[idx], self.y[idx])
        return RweSample(self.x[idx], self.d[idx])


@dataclass(frozen=True)
class IntegratedDataset:
    schema: CovariateSchema
    trial: TrialSample
    rwe: RweSample
    outcome_type: OutcomeType = OutcomeType.CONTINUOUS

    def __post_init__(self):
        outcome_type = OutcomeType(self.outcome_type)
        object.__setattr__(self, "outcome_type", outcome_type)
        p = self.schema.p
        if self.trial.x.shape[1] != p:
            raise DimensionMismatch(f"trial x has {self.trial.x.shape[1]} columns, schema has {p}")
        if self.rwe.x.shape[1] != p:
            raise DimensionMismatch(f"rwe x has {self.rwe.x.shape[1]} columns, schema has {p}")
        if outcome_type is OutcomeType.BINARY:
            for source, y in (("trial", self.trial.y), ("rwe", self.rwe.y)):
                if y is None:
                    continue
                bad = (y != 0.0) & (y != 1.0)
                if bad.any():
                    row = _first_bad_row(bad)
                    raise InvalidOutcomeCode(row, y[row - 1], source)

    @property
    def n(self) -> int:
        return self.trial.n

    @property
    def m(self) -> int:
        return self.rwe.m

    def resample(self, trial_idx: np.ndarray, rwe_idx: np.ndarray) -> "IntegratedDataset":
        return IntegratedDataset(
            self.schema, self.trial.take(trial_idx), self.rwe.take(rwe_idx), self.outcome_type
        )


def empirical_pi_a(trial: TrialSample) -> float:
    """Treatment probability: the known value if set, else the arm-1 share."""
    if trial.known_pi_a is not None:
        return trial.known_pi_a
    return float(trial.a.mean())


# -- CSV ---------------------------------------------------------------------


def _read_table(path: Path, source: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("<header>", source) from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    header = [h.strip().lower() for h in header]
    if len(set(header)) != len(header):
        raise SchemaError(f"{source}: duplicate column names in header {header}")
    return header, rows


def _parse_column(rows, col_idx: int, name: str, source: str) -> np.ndarray:
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        cell = row[col_idx].strip() if col_idx < len(row) else ""
        try:
            value = float(cell)
        except ValueError:
            raise NonNumericCell(i + 1, name, cell, source) from None
        if not math.isfinite(value):
            raise NonNumericCell(i + 1, name, cell, source)
        out[i] = value
    return out


def _parse_treatment(rows, col_idx: int, source: str) -> np.ndarray:
    a = _parse_column(rows, col_idx, "a", source)
    bad = (a != 0.0) & (a != 1.0)
    if bad.any():
        row = _first_bad_row(bad)
        raise InvalidTreatmentCode(row, rows[row - 1][col_idx].strip(), source)
    return a


def load_csv_pair(rct_path, rwe_path, outcome_type=OutcomeType.CONTINUOUS,
                  known_pi_a: Optional[float] = None) -> IntegratedDataset:
    """Load and validate a trial CSV and a real-world CSV.

    Covariates are every trial column other than ``a`` and ``y`` (in header
    order); the real-world file must carry the same covariate names plus
    ``d``, and optionally ``a`` and ``y`` together. Header matching is
    case-insensitive. Row numbers in errors are 1-based data rows.
    """
    outcome_type = OutcomeType(outcome_type)
    rct_header, rct_rows = _read_table(Path(rct_path), "rct")
    rwe_header, rwe_rows = _read_table(Path(rwe_path), "rwe")

    for col in ("a", "y"):
        if col not in rct_header:
            raise MissingColumn(col, "rct")
    names = [h for h in rct_header if h not in ("a", "y")]
    if not names:
        raise MissingColumn("x1", "rct")
    schema = CovariateSchema(tuple(names))
    for col in names + ["d"]:
        if col not in rwe_header:
            raise MissingColumn(col, "rwe")
    has_a, has_y = "a" in rwe_header, "y" in rwe_header
    if has_a != has_y:
        raise MissingColumn("y" if has_a else "a", "rwe")
    extra = set(rwe_header) - set(names) - {"d", "a", "y"}
    if extra:
        logger.warning("ignoring unrecognised rwe columns: %s", ", ".join(sorted(extra)))

    def matrix(header, rows, source):
        if not rows:
            return np.empty((0, len(names)))
        cols = [_parse_column(rows, header.index(c), c, source) for c in names]
        return np.column_stack(cols)

    x_rct = matrix(rct_header, rct_rows, "rct")
    a_rct = _parse_treatment(rct_rows, rct_header.index("a"), "rct")
    y_rct = _parse_column(rct_rows, rct_header.index("y"), "y", "rct")
    x_rwe = matrix(rwe_header, rwe_rows, "rwe")
    d = _parse_column(rwe_rows, rwe_header.index("d"), "d", "rwe")
    bad = d <= 0
    if bad.any():
        row = _first_bad_row(bad)
        raise NonPositiveDesignWeight(row, d[row - 1])
    a_rwe = y_rwe = None
    if has_a:
        a_rwe = _parse_treatment(rwe_rows, rwe_header.index("a"), "rwe")
        y_rwe = _parse_column(rwe_rows, rwe_header.index("y"), "y", "rwe")

    trial = TrialSample(x_rct, a_rct, y_rct, known_pi_a)
    rwe = RweSample(x_rwe, d, a_rwe, y_rwe)
    return IntegratedDataset(schema, trial, rwe, outcome_type)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv_pair(dataset: IntegratedDataset, rct_path, rwe_path) -> None:
    """Write both samples with 17 significant digits (exact float round-trip)."""
    names = list(dataset.schema.names)
    with open(rct_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["a", "y"])
        t = dataset.trial
        for i in range(t.n):
            w.writerow([_fmt(v) for v in t.x[i]] + [str(int(t.a[i])), _fmt(t.y[i])])
    with open(rwe_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        r = dataset.rwe
        w.writerow(names + ["d"] + (["a", "y"] if r.has_outcomes else []))
        for j in range(r.m):
            row = [_fmt(v) for v in r.x[j]] + [_fmt(r.d[j])]
            if r.has_outcomes:
                row += [str(int(r.a[j])), _fmt(r.y[j])]
            w.writerow(row)

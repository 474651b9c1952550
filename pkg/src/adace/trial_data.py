"""Observed-trial data model: subject records, container, validation, CSV IO.

A trial observes, per subject: baseline covariates X (always complete),
intermediate measurements Z^(1..K-1), adherence indicators I^(1..K-1) and a
final outcome Y.  Missingness is structural: dropout after period k blanks
everything measured later.  Non-adherence cascades -- once a subject stops,
all later indicators are an explicit 0, never missing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

MISSING = None  # record-level sentinel; arrays use NaN internally


class StratumLabel(Enum):
    """Adherence-defined principal strata (the whole population is not one)."""

    S_STAR_PLUS = "s*+"  # adheres to the experimental treatment: A(1) = 1
    S_PLUS_STAR = "s+*"  # adheres to the control treatment:      A(0) = 1
    S_PLUS_PLUS = "s++"  # adheres to both:             A(0) = 1 and A(1) = 1

    @classmethod
    def parse(cls, text: str) -> "StratumLabel":
        for label in cls:
            if label.value == text.lower():
                return label
        raise ValueError(f"unknown stratum {text!r}; expected one of "
                         f"{[l.value for l in cls]}")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observed data.  `None` marks a missing value."""

    subject_id: str
    arm: int
    x: tuple[float, ...]
    z: tuple[float | None, ...]
    i_flags: tuple[int | None, ...]
    y: float | None


@dataclass(frozen=True)
class Violation:
    subject_id: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.subject_id}: {self.rule} ({self.detail})"


@dataclass
class PotentialOutcomeFrame:
    """Per-subject values under both hypothetical treatments.

    First axis of every array indexes the hypothetical treatment t in {0, 1}.
    `observed_*` masks mark cells copied from the trial data (t == arm);
    everything else was imputed or generated.
    """

    subject_id: str
    arm: int
    z: np.ndarray          # (2, K-1) float
    i_flags: np.ndarray    # (2, K-1) int
    a: np.ndarray          # (2,) int
    y: np.ndarray          # (2,) float
    observed_z: np.ndarray  # (2, K-1) bool
    observed_i: np.ndarray  # (2, K-1) bool
    observed_y: np.ndarray  # (2,) bool


class TrialDataset:
    """Immutable container of subject records with a common visit schedule.

    Backed by dense arrays (NaN = missing) so that downstream model fitting
    is vectorised; `records` materialises the row view on demand.  Instances
    are safe to share read-only across parallel workers.
    """

    def __init__(self, subject_ids, arm, x, z, i_flags, y):
        self.subject_ids: tuple[str, ...] = tuple(str(s) for s in subject_ids)
        self.arm = np.asarray(arm, dtype=np.int8)
        self.x = np.asarray(x, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64)
        self.i_flags = np.asarray(i_flags, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)

        n = len(self.subject_ids)
        if self.x.ndim != 2 or self.z.ndim != 2 or self.i_flags.ndim != 2:
            raise ValueError("x, z and i_flags must be 2-d arrays")
        shapes = (self.arm.shape[0], self.x.shape[0], self.z.shape[0],
                  self.i_flags.shape[0], self.y.shape[0])
        if any(s != n for s in shapes):
            raise ValueError("all per-subject arrays must have one row per subject")
        if self.z.shape[1] != self.i_flags.shape[1]:
            raise ValueError("z and i_flags must cover the same periods")
        if self.x.shape[1] < 1 or self.z.shape[1] < 1:
            raise ValueError("need at least one covariate and one period")
        if len(set(self.subject_ids)) != n:
            raise ValueError("subject_ids must be unique")
        bad_arm = ~np.isin(self.arm, (0, 1))
        if bad_arm.any():
            raise ValueError(f"arm must be 0 or 1 (subject "
                             f"{self.subject_ids[int(np.argmax(bad_arm))]})")

        self.p: int = self.x.shape[1]
        self.K: int = self.z.shape[1] + 1
        self.n0: int = int((self.arm == 0).sum())
        self.n1: int = int((self.arm == 1).sum())
        self._records: tuple[SubjectRecord, ...] | None = None
        for a in (self.arm, self.x, self.z, self.i_flags, self.y):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord]) -> "TrialDataset":
        if not records:
            raise ValueError("dataset needs at least one record")
        p = len(records[0].x)
        k1 = len(records[0].z)
        for r in records:
            if len(r.x) != p or len(r.z) != k1 or len(r.i_flags) != k1:
                raise ValueError(f"record {r.subject_id}: inconsistent p or K")
        nan = float("nan")
        ds = cls(
            subject_ids=[r.subject_id for r in records],
            arm=[r.arm for r in records],
            x=[[nan if v is None else float(v) for v in r.x] for r in records],
            z=[[nan if v is None else float(v) for v in r.z] for r in records],
            i_flags=[[nan if v is None else float(v) for v in r.i_flags]
                     for r in records],
            y=[nan if r.y is None else float(r.y) for r in records],
        )
        ds._records = tuple(records)
        return ds

    @property
    def records(self) -> tuple[SubjectRecord, ...]:
        if self._records is None:
            self._records = tuple(self._record(j) for j in range(self.n))
        return self._records

    def _record(self, j: int) -> SubjectRecord:
        def opt(v):
            return None if np.isnan(v) else float(v)

        return SubjectRecord(
            subject_id=self.subject_ids[j],
            arm=int(self.arm[j]),
            x=tuple(float(v) for v in self.x[j]),
            z=tuple(opt(v) for v in self.z[j]),
            i_flags=tuple(None if np.isnan(v) else int(v) for v in self.i_flags[j]),
            y=opt(self.y[j]),
        )

    def take(self, indices, subject_ids=None) -> "TrialDataset":
        """Row subset/resample; ids are relabelled positionally by default."""
        idx = np.asarray(indices)
        if subject_ids is None:
            subject_ids = [f"r{k}" for k in range(idx.size)]
        return TrialDataset(subject_ids, self.arm[idx], self.x[idx],
                            self.z[idx], self.i_flags[idx], self.y[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (self.subject_ids == other.subject_ids
                and np.array_equal(self.arm, other.arm)
                and np.array_equal(self.x, other.x, equal_nan=True)
                and np.array_equal(self.z, other.z, equal_nan=True)
                and np.array_equal(self.i_flags, other.i_flags, equal_nan=True)
                and np.array_equal(self.y, other.y, equal_nan=True))


def adherence(record: SubjectRecord) -> int:
    """Overall adherence A = prod_k I^(k), with explicit zeros short-circuiting.

    Raises ValueError when the first indicator is missing, or when a missing
    indicator follows an unbroken run of ones (A is then undetermined).
    """
    if record.i_flags[0] is None:
        raise ValueError(f"{record.subject_id}: adherence indicator for the "
                         "first period is missing")
    for k, flag in enumerate(record.i_flags):
        if flag == 0:
            return 0
        if flag is None:
            raise ValueError(f"{record.subject_id}: adherence undetermined "
                             f"(indicator missing at period {k + 1})")
    return 1


def validate(dataset: TrialDataset) -> list[Violation]:
    """Check every record against the structural missingness/adherence rules.

    Violations are returned as data, not raised; an empty list means the
    dataset is valid.
    """
    z, iflags, y, x = dataset.z, dataset.i_flags, dataset.y, dataset.x
    k1 = dataset.K - 1
    i_obs = ~np.isnan(iflags)
    i_one = i_obs & (iflags == 1)
    i_binary = ~i_obs | (iflags == 0) | (iflags == 1)
    z_obs = ~np.isnan(z)
    adherent = i_one.all(axis=1)
    # still in the study at period k+1: adhered through every period up to k
    at_risk = np.cumprod(i_one, axis=1).astype(bool)

    checks: list[tuple[str, np.ndarray, str]] = [
        ("x-missing", np.isnan(x).any(axis=1), "baseline covariates must be complete"),
        ("i-not-binary", ~i_binary.all(axis=1), "adherence flags must be 0 or 1"),
        ("i1-missing", ~i_obs[:, 0], "first adherence indicator unobserved"),
        ("z1-missing", ~z_obs[:, 0], "first intermediate value unobserved"),
    ]
    for k in range(1, k1):
        checks += [
            ("non-monotone-adherence", i_one[:, k] & ~i_one[:, k - 1],
             f"I({k + 1})=1 after non-adherence"),
            ("i-missing-at-risk", ~i_obs[:, k] & at_risk[:, k - 1],
             f"I({k + 1}) unobserved while still adherent"),
            ("z-after-dropout", z_obs[:, k] & ~at_risk[:, k - 1],
             f"Z({k + 1}) present after dropout"),
            ("z-missing-at-risk", ~z_obs[:, k] & at_risk[:, k - 1],
             f"Z({k + 1}) unobserved while still adherent"),
        ]
    checks += [
        ("y-after-dropout", ~np.isnan(y) & ~adherent, "Y present for a non-adherer"),
        ("y-missing-adherent", np.isnan(y) & adherent, "Y unobserved for an adherer"),
    ]

    out: list[Violation] = []
    for j in range(dataset.n):
        sid = dataset.subject_ids[j]
        for rule, mask, detail in checks:
            if mask[j]:
                out.append(Violation(sid, rule, detail))
    return out


class CsvParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _expected_header(p: int, k1: int) -> list[str]:
    return (["subject_id", "arm"]
            + [f"x{i + 1}" for i in range(p)]
            + [f"z{i + 1}" for i in range(k1)]
            + [f"i{i + 1}" for i in range(k1)]
            + ["y"])


def _infer_shape(header: list[str]) -> tuple[int, int]:
    names = [h.strip() for h in header]
    p = sum(1 for h in names if h[:1] == "x" and h[1:].isdigit())
    k1 = sum(1 for h in names if h[:1] == "z" and h[1:].isdigit())
    if p < 1 or k1 < 1 or names != _expected_header(p, k1):
        raise CsvParseError(1, "header must be subject_id,arm,x1..xp,"
                               "z1..z{K-1},i1..i{K-1},y")
    return p, k1


def load_csv(path) -> TrialDataset:
    """Read a trial from CSV.  Empty fields are missing values."""
    records: list[SubjectRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(1, "empty file") from None
        p, k1 = _infer_shape(header)
        width = 2 + p + 2 * k1 + 1
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CsvParseError(line, f"expected {width} fields, got {len(row)}")
            sid = row[0]
            if row[1] not in ("0", "1"):
                raise CsvParseError(line, f"arm must be 0 or 1, got {row[1]!r}")
            arm = int(row[1])

            def num(cell: str, what: str) -> float | None:
                if cell == "":
                    return None
                try:
                    return float(cell)
                except ValueError:
                    raise CsvParseError(line, f"non-numeric {what}: {cell!r}") from None

            x = tuple(num(c, "covariate") for c in row[2:2 + p])
            if any(v is None for v in x):
                raise CsvParseError(line, "baseline covariates may not be empty")
            z = tuple(num(c, "measurement") for c in row[2 + p:2 + p + k1])
            i_flags = []
            for c in row[2 + p + k1:2 + p + 2 * k1]:
                if c == "":
                    i_flags.append(None)
                elif c in ("0", "1"):
                    i_flags.append(int(c))
                else:
                    raise CsvParseError(line, f"adherence flag must be 0, 1 or "
                                              f"empty, got {c!r}")
            yv = num(row[-1], "outcome")
            records.append(SubjectRecord(sid, arm, x, z, tuple(i_flags), yv))
    if not records:
        raise CsvParseError(2, "no data rows")
    return TrialDataset.from_records(records)


def save_csv(dataset: TrialDataset, path) -> None:
    """Write a trial to CSV; load_csv(save_csv(ds)) reproduces ds bit-exactly."""

    def cell(v) -> str:
        return "" if v is None else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_expected_header(dataset.p, dataset.K - 1))
        for r in dataset.records:
            writer.writerow(
                [r.subject_id, str(r.arm)]
                + [cell(v) for v in r.x]
                + [cell(v) for v in r.z]
                + ["" if v is None else str(int(v)) for v in r.i_flags]
                + [cell(r.y)])

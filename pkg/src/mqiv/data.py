"""Observation container, CSV ingestion and fold assignment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mqiv.errors import DataError

# Empirical |mean(A|Z=1) - mean(A|Z=0)| below this triggers a weak-relevance warning.
RELEVANCE_THRESHOLD = 0.02


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """N observations of (Y, A, Z, X).

    Arrays are copied and made read-only on construction so a Dataset can be
    shared freely between folds, threads and estimators.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a).ravel()
        z = np.asarray(self.z).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one observation")
        if not (a.shape[0] == z.shape[0] == x.shape[0] == n):
            raise DataError(
                f"column lengths differ: y={n}, a={a.shape[0]}, z={z.shape[0]}, x={x.shape[0]}"
            )
        for name, col in (("a", a), ("z", z)):
            bad = np.flatnonzero((col != 0) & (col != 1))
            if bad.size:
                raise DataError(f"column {name!r} must be 0/1; row {bad[0] + 1} is {col[bad[0]]!r}",
                                row=int(bad[0]) + 1, column=name)
        if not np.all(np.isfinite(y)):
            row = int(np.flatnonzero(~np.isfinite(y))[0]) + 1
            raise DataError(f"non-finite outcome in row {row}", row=row, column="y")
        if not np.all(np.isfinite(x)):
            row = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0]) + 1
            raise DataError(f"non-finite covariate in row {row}", row=row, column="x")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} covariate names for {x.shape[1]} covariate columns")
        object.__setattr__(self, "y", _frozen(y, float))
        object.__setattr__(self, "a", _frozen(a, np.int8))
        object.__setattr__(self, "z", _frozen(z, np.int8))
        object.__setattr__(self, "x", _frozen(x, float))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.x[idx], self.covariate_names)


@dataclass(frozen=True)
class ColumnMapping:
    outcome_column: str = "y"
    treatment_column: str = "a"
    instrument_column: str = "z"
    covariate_columns: tuple = ("x1",)

    def __post_init__(self):
        covs = tuple(self.covariate_columns)
        object.__setattr__(self, "covariate_columns", covs)
        if not covs:
            raise DataError("at least one covariate column is required")
        names = [self.outcome_column, self.treatment_column, self.instrument_column, *covs]
        if len(set(names)) != len(names):
            raise DataError(f"column names must be distinct, got {names}")

    @property
    def columns(self) -> list:
        return [self.outcome_column, self.treatment_column, self.instrument_column,
                *self.covariate_columns]


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of: np.ndarray
    k: int

    def indices(self, fold: int) -> np.ndarray:
        """Rows in ``fold`` (the evaluation set I_k)."""
        return np.flatnonzero(self.fold_of == fold)

    def complement(self, fold: int) -> np.ndarray:
        """Rows outside ``fold`` (the training set)."""
        return np.flatnonzero(self.fold_of != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


@dataclass
class ValidationReport:
    n_total: int
    n_treated: int
    n_by_cell: np.ndarray  # [a, z] counts
    marginal_relevance: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_treated": self.n_treated,
            "n_by_cell": {f"a{a}_z{z}": int(self.n_by_cell[a, z]) for a in (0, 1) for z in (0, 1)},
            "marginal_relevance": self.marginal_relevance,
            "warnings": list(self.warnings),
        }


def _parse_binary(value: str, row: int, column: str) -> int:
    v = value.strip()
    if v in ("0", "1"):
        return int(v)
    try:
        f = float(v)
    except ValueError:
        f = math.nan
    if f in (0.0, 1.0):
        return int(f)
    raise DataError(f"row {row}: column {column!r} must be 0 or 1, got {value!r}", row=row, column=column)


def _parse_real(value: str, row: int, column: str) -> float:
    try:
        f = float(value)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} is not a number: {value!r}",
                        row=row, column=column) from None
    if not math.isfinite(f):
        raise DataError(f"row {row}: column {column!r} is not finite: {value!r}", row=row, column=column)
    return f


def load_csv(path, mapping: ColumnMapping | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Row numbers in error messages count data rows from 1 (the header is not
    counted).
    """
    mapping = mapping or ColumnMapping()
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty; a header row is required") from None
        missing = [c for c in mapping.columns if c not in header]
        if missing:
            raise DataError(f"missing column(s) in {path.name}: {', '.join(missing)}", column=missing[0])
        pos = {name: header.index(name) for name in mapping.columns}
        ys, as_, zs, xs = [], [], [], []
        for row, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"row {row}: expected {len(header)} fields, got {len(record)}", row=row)
            ys.append(_parse_real(record[pos[mapping.outcome_column]], row, mapping.outcome_column))
            as_.append(_parse_binary(record[pos[mapping.treatment_column]], row, mapping.treatment_column))
            zs.append(_parse_binary(record[pos[mapping.instrument_column]], row, mapping.instrument_column))
            xs.append([_parse_real(record[pos[c]], row, c) for c in mapping.covariate_columns])
    if not ys:
        raise DataError(f"{path} has a header but no data rows")
    return Dataset(np.array(ys), np.array(as_), np.array(zs), np.array(xs), mapping.covariate_columns)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(ds: Dataset, path, extra_columns: dict | None = None,
             outcome: str = "y", treatment: str = "a", instrument: str = "z") -> None:
    """Write ``ds`` in the format read by :func:`load_csv`.

    ``path`` may also be an open text stream. Reals are written with 17
    significant digits, which round-trips IEEE doubles. ``extra_columns`` maps
    further column names to length-N arrays (e.g. latents).
    """
    if hasattr(path, "write"):
        _write_rows(ds, path, extra_columns or {}, (outcome, treatment, instrument))
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_rows(ds, fh, extra_columns or {}, (outcome, treatment, instrument))


def _write_rows(ds: Dataset, fh, extra: dict, names: tuple) -> None:
    header = [*names, *ds.covariate_names, *extra]
    cols = [np.asarray(v) for v in extra.values()]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for i in range(ds.n):
        writer.writerow([
            _fmt(ds.y[i]), int(ds.a[i]), int(ds.z[i]),
            *(_fmt(v) for v in ds.x[i]),
            *(_fmt(c[i]) if np.issubdtype(c.dtype, np.floating) else int(c[i]) for c in cols),
        ])


def validate(ds: Dataset) -> ValidationReport:
    """Cheap sanity diagnostics. Never raises and never mutates ``ds``."""
    a = ds.a.astype(int)
    z = ds.z.astype(int)
    cells = np.zeros((2, 2), dtype=int)
    np.add.at(cells, (a, z), 1)
    warnings = []
    mean_a = a.mean()
    if mean_a in (0.0, 1.0):
        warnings.append("degenerate treatment: A is constant")
    if z.min() == z.max():
        warnings.append("degenerate instrument: Z is constant")
        relevance = 0.0
    else:
        relevance = float(abs(a[z == 1].mean() - a[z == 0].mean()))
    for ai in (0, 1):
        for zi in (0, 1):
            if cells[ai, zi] == 0:
                warnings.append(f"empty cell (A={ai}, Z={zi})")
    if relevance < RELEVANCE_THRESHOLD:
        warnings.append(f"weak instrument: |mean(A|Z=1) - mean(A|Z=0)| = {relevance:.4f} < {RELEVANCE_THRESHOLD}")
    return ValidationReport(
        n_total=ds.n,
        n_treated=int(a.sum()),
        n_by_cell=cells,
        marginal_relevance=relevance,
        warnings=warnings,
    )


def split_folds(n: int, k: int, seed: int = 0) -> FoldAssignment:
    """Balanced seeded partition of range(n) into k folds."""
    if k < 2 or k > n:
        raise ValueError(f"fold count must satisfy 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k
    fold_of.setflags(write=False)
    return FoldAssignment(fold_of=fold_of, k=k)


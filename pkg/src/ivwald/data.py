"""Observed-data tables, working-model specifications, and dataset transforms.

The observed sample is (Y, D, Z, X) with a binary treatment D, an instrument
Z that is either continuous or coded 0..K-1, and a covariate matrix X whose
first column is identically one.  Working models for the five nuisance
regressions are specified per nuisance as a link plus a set of X columns.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

NUISANCES = ("delta", "delta_z", "mu_z", "mu_d", "mu_y")


class ZKind(enum.Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ObservationTable:
    """Immutable observed sample.

    y : outcome, length n (binary {0,1} or continuous)
    d : binary treatment, length n
    z : instrument, length n; coded 0..K-1 when categorical
    x : n x p covariate matrix, first column all ones
    z_kind : CONTINUOUS or CATEGORICAL
    z_levels : K when categorical, None otherwise
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    z_kind: ZKind = ZKind.CONTINUOUS
    z_levels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", _col(self.y, "y"))
        object.__setattr__(self, "d", _col(self.d, "d"))
        object.__setattr__(self, "z", _col(self.z, "z"))
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DataError(f"x must be a 2-d matrix, got ndim={x.ndim}")
        x = np.ascontiguousarray(x)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def y_binary(self) -> bool:
        return bool(np.isin(self.y, (0.0, 1.0)).all())

    @property
    def z_binary(self) -> bool:
        return self.z_kind is ZKind.CATEGORICAL and self.z_levels == 2


def _col(v, name) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def validate(table: ObservationTable) -> ObservationTable:
    """Check every table invariant; return the table unchanged if all hold.

    Errors name the offending column and the first offending row so callers
    can trace bad input records.
    """
    n = table.n
    if n < 1:
        raise DataError("table is empty")
    for name in ("y", "d", "z"):
        col = getattr(table, name)
        if col.shape[0] != n:
            raise DataError(f"column {name} has length {col.shape[0]}, expected {n}")
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise DataError(f"non-finite value in column {name} at row {bad[0]}")
    if table.x.shape[0] != n:
        raise DataError(f"x has {table.x.shape[0]} rows, expected {n}")
    bad = np.argwhere(~np.isfinite(table.x))
    if bad.size:
        i, j = bad[0]
        raise DataError(f"non-finite value in x at row {i}, column {j}")
    if not np.all(table.x[:, 0] == 1.0):
        i = int(np.flatnonzero(table.x[:, 0] != 1.0)[0])
        raise DataError(f"first column of x must be identically 1 (row {i})")
    off = np.flatnonzero(~np.isin(table.d, (0.0, 1.0)))
    if off.size:
        raise DataError(f"treatment not binary: d[{off[0]}] = {table.d[off[0]]}")
    if table.z_kind is ZKind.CATEGORICAL:
        k = table.z_levels
        if k is None or k < 2:
            raise DataError("categorical z requires z_levels >= 2")
        off = np.flatnonzero(~np.isin(table.z, np.arange(k, dtype=float)))
        if off.size:
            raise DataError(f"z[{off[0]}] = {table.z[off[0]]} outside levels 0..{k - 1}")
        present = set(np.unique(table.z).astype(int))
        missing = sorted(set(range(k)) - present)
        if missing:
            raise DataError(f"categorical level {missing[0]} of z has no observations")
    elif table.z_levels is not None:
        raise DataError("z_levels must be None for continuous z")
    return table


def design(table: ObservationTable, columns) -> np.ndarray:
    """Sub-matrix of x restricted to `columns` (order preserved)."""
    cols = list(columns)
    for c in cols:
        if not 0 <= c < table.p:
            raise DataError(f"design column {c} out of range for p={table.p}")
    return table.x[:, cols]


def dichotomize(table: ObservationTable, q: float) -> ObservationTable:
    """Threshold a continuous instrument at its empirical q-quantile.

    Uses the nearest-rank rule: the threshold is the ceil(q*n)-th order
    statistic, and ties are sent upward (z >= threshold maps to 1).  Only z
    changes; y, d, x are shared bit-exactly with the input table.
    """
    if table.z_kind is not ZKind.CONTINUOUS:
        raise DataError("dichotomize requires a continuous instrument")
    if not 0.0 < q < 1.0:
        raise DataError(f"quantile must be in (0, 1), got {q}")
    z = table.z
    if np.min(z) == np.max(z):
        raise DataError("cannot dichotomize a degenerate (constant) instrument")
    rank = max(1, math.ceil(q * table.n))
    threshold = np.sort(z)[rank - 1]
    z_new = (z >= threshold).astype(float)
    return replace(table, z=z_new, z_kind=ZKind.CATEGORICAL, z_levels=2)


# ---------------------------------------------------------------------------
# Working models


class Link(enum.Enum):
    IDENTITY = "identity"
    EXPIT = "expit"
    TANH = "tanh"


@dataclass(frozen=True)
class NuisanceModel:
    link: Link
    columns: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        if len(set(self.columns)) != len(self.columns):
            raise DataError(f"duplicate design columns: {self.columns}")


@dataclass(frozen=True)
class WorkingModelSpec:
    """Per-nuisance link and covariate selection.

    Link constraints keep each working model inside its parameter's natural
    range: the treatment-effect curve uses tanh for binary outcomes so it
    stays in [-1, 1], the instrument-shift curve uses tanh for a binary
    instrument, and binary regressions use expit.
    """

    delta: NuisanceModel
    delta_z: NuisanceModel
    mu_z: NuisanceModel
    mu_d: NuisanceModel
    mu_y: NuisanceModel

    def model(self, name: str) -> NuisanceModel:
        if name not in NUISANCES:
            raise DataError(f"unknown nuisance {name!r}")
        return getattr(self, name)

    @classmethod
    def default(
        cls,
        p: int,
        *,
        z_binary: bool,
        y_binary: bool,
        columns: dict[str, tuple[int, ...]] | None = None,
    ) -> "WorkingModelSpec":
        """Spec with standard links and full-X columns unless overridden."""
        cols = {name: tuple(range(p)) for name in NUISANCES}
        if columns:
            for name, sel in columns.items():
                if name not in NUISANCES:
                    raise DataError(f"unknown nuisance {name!r} in column map")
                cols[name] = tuple(sel)
        return cls(
            delta=NuisanceModel(Link.TANH if y_binary else Link.IDENTITY, cols["delta"]),
            delta_z=NuisanceModel(Link.TANH if z_binary else Link.IDENTITY, cols["delta_z"]),
            mu_z=NuisanceModel(Link.EXPIT if z_binary else Link.IDENTITY, cols["mu_z"]),
            mu_d=NuisanceModel(Link.EXPIT, cols["mu_d"]),
            mu_y=NuisanceModel(Link.EXPIT if y_binary else Link.IDENTITY, cols["mu_y"]),
        )

    def validate_against(self, table: ObservationTable) -> "WorkingModelSpec":
        y_binary = table.y_binary
        z_binary = table.z_binary
        if y_binary and self.delta.link is not Link.TANH:
            raise DataError("delta link must be tanh for a binary outcome")
        if not y_binary and self.delta.link is Link.EXPIT:
            raise DataError("delta link expit is not supported")
        if z_binary and self.delta_z.link is not Link.TANH:
            raise DataError("delta_z link must be tanh for a binary instrument")
        if not z_binary and self.delta_z.link is not Link.IDENTITY:
            raise DataError("delta_z link must be identity for a continuous instrument")
        if z_binary and self.mu_z.link is not Link.EXPIT:
            raise DataError("mu_z link must be expit for a binary instrument")
        if not z_binary and self.mu_z.link is not Link.IDENTITY:
            raise DataError("mu_z link must be identity for a continuous instrument")
        if self.mu_d.link is not Link.EXPIT:
            raise DataError("mu_d link must be expit (treatment is binary)")
        if y_binary and self.mu_y.link is not Link.EXPIT:
            raise DataError("mu_y link must be expit for a binary outcome")
        for name in NUISANCES:
            for c in self.model(name).columns:
                if not 0 <= c < table.p:
                    raise DataError(f"{name} design column {c} out of range for p={table.p}")
        return self


# ---------------------------------------------------------------------------
# Misspecification scenarios


class Scenario(enum.Enum):
    ALL_CORRECT = "all_correct"
    M1_CORRECT = "m1_correct"
    M2_CORRECT = "m2_correct"
    M3_CORRECT = "m3_correct"
    ALL_WRONG = "all_wrong"


# Nuisances whose design drops the confounder-proxy column under each
# scenario; the remaining nuisances keep the full covariate set.
_SCENARIO_DROPS = {
    Scenario.ALL_CORRECT: frozenset(),
    Scenario.M1_CORRECT: frozenset({"delta_z", "mu_z"}),
    Scenario.M2_CORRECT: frozenset({"delta", "mu_y"}),
    Scenario.M3_CORRECT: frozenset({"delta_z", "mu_d", "mu_y"}),
    Scenario.ALL_WRONG: frozenset(NUISANCES),
}


@dataclass(frozen=True)
class ScenarioSpec:
    """A misspecification scenario with an explicit dropped-column index.

    `x3_index` names the covariate column excluded from the misspecified
    working models; carrying it explicitly keeps the harness unambiguous
    when covariates are reordered.
    """

    name: Scenario
    p: int = 3
    x3_index: int = 2
    column_sets: dict[str, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        if not 0 < self.x3_index < self.p:
            raise DataError(f"x3_index {self.x3_index} out of range for p={self.p}")
        full = tuple(range(self.p))
        reduced = tuple(c for c in full if c != self.x3_index)
        drops = _SCENARIO_DROPS[self.name]
        sets = {m: (reduced if m in drops else full) for m in NUISANCES}
        object.__setattr__(self, "column_sets", sets)

    def model_spec(self, *, z_binary: bool, y_binary: bool) -> WorkingModelSpec:
        return WorkingModelSpec.default(
            self.p, z_binary=z_binary, y_binary=y_binary, columns=self.column_sets
        )


# ---------------------------------------------------------------------------
# CSV ingestion


def load_csv(path) -> ObservationTable:
    """Read an observed sample from CSV.

    Requires a header row with columns y, d, z, x1..xp (any order, UTF-8,
    '.' decimal point).  The intercept column is synthesized as x column 0;
    it is never read from the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    names = {name: i for i, name in enumerate(header)}
    if len(names) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    for required in ("y", "d", "z"):
        if required not in names:
            label = {"y": "outcome", "d": "treatment", "z": "instrument"}[required]
            raise DataError(f"{path}: {label} column absent (expected {required!r})")
    x_names = sorted(
        (name for name in names if name.startswith("x") and name[1:].isdigit()),
        key=lambda s: int(s[1:]),
    )
    expected = [f"x{j}" for j in range(1, len(x_names) + 1)]
    if x_names != expected:
        raise DataError(f"{path}: covariate columns must be x1..xp, got {x_names}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    def parse(row_idx, row, col):
        cell = row[names[col]].strip()
        try:
            return float(cell)
        except ValueError:
            raise DataError(f"{path}: row {row_idx + 1}, column {col}: cannot parse {cell!r}") from None

    n = len(rows)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(row)} fields, expected {len(header)}")
    y = np.array([parse(i, r, "y") for i, r in enumerate(rows)])
    d = np.array([parse(i, r, "d") for i, r in enumerate(rows)])
    z = np.array([parse(i, r, "z") for i, r in enumerate(rows)])
    x = np.ones((n, len(x_names) + 1))
    for j, name in enumerate(x_names, start=1):
        x[:, j] = [parse(i, r, name) for i, r in enumerate(rows)]
    zvals = np.unique(z)
    if np.isin(zvals, (0.0, 1.0)).all() and zvals.size == 2:
        table = ObservationTable(y, d, z, x, z_kind=ZKind.CATEGORICAL, z_levels=2)
    else:
        table = ObservationTable(y, d, z, x)
    return validate(table)

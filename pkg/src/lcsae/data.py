"""Survey responses, population cells and covariate encoding.

All tables are held column-wise as read-only numpy arrays.  Response codes
are 1-based (``1..H_t``), districts are 1-based, small areas are 1-based and
defined as district x age-class intersections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SEX_LEVELS = ("F", "M")
MARITAL_LEVELS = ("single", "married", "separated", "widow")
COVARIATE_COLUMNS = ("age", "sex", "marital", "district")
CELL_COLUMNS = ("age", "sex", "marital", "district", "count")


class DataError(ValueError):
    """Raised on malformed or inconsistent input tables."""


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ItemSchema:
    items: tuple[tuple[str, int], ...]

    def __post_init__(self):
        items = tuple((str(name), int(h)) for name, h in self.items)
        object.__setattr__(self, "items", items)
        if len(items) < 1:
            raise DataError("item schema needs at least one item")
        names = [name for name, _ in items]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate item names in schema: {names}")
        for name, h in items:
            if h < 2:
                raise DataError(f"item {name!r} must have at least 2 categories, got {h}")

    @classmethod
    def from_config(cls, entries) -> "ItemSchema":
        """Build from ``[{"name": ..., "categories": ...}, ...]`` or ``[(name, H), ...]``."""
        items = []
        for entry in entries:
            if isinstance(entry, dict):
                items.append((entry["name"], entry["categories"]))
            else:
                name, h = entry
                items.append((name, h))
        return cls(tuple(items))

    @property
    def T(self) -> int:
        return len(self.items)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.items]

    @property
    def n_categories(self) -> np.ndarray:
        return np.array([h for _, h in self.items], dtype=np.int64)

    def to_config(self) -> list[dict]:
        return [{"name": name, "categories": h} for name, h in self.items]


@dataclass(frozen=True)
class AgeClasses:
    """Maps integer ages to age classes through sorted breakpoints.

    A breakpoint ``b`` opens a new class at ``age >= b``; ``(65, 80)`` gives
    the classes ``<65``, ``65-79`` and ``>=80``.
    """

    breakpoints: tuple[int, ...] = ()

    def __post_init__(self):
        bp = tuple(int(b) for b in self.breakpoints)
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise DataError(f"age-class breakpoints must be strictly increasing: {bp}")
        object.__setattr__(self, "breakpoints", bp)

    @property
    def n_classes(self) -> int:
        return len(self.breakpoints) + 1

    def classify(self, age) -> np.ndarray:
        """0-based age class of each age."""
        return np.searchsorted(np.asarray(self.breakpoints), np.asarray(age), side="right")

    def labels(self) -> list[str]:
        bp = self.breakpoints
        if not bp:
            return ["all"]
        out = [f"<{bp[0]}"]
        out += [f"{a}-{b - 1}" for a, b in zip(bp, bp[1:])]
        out.append(f">={bp[-1]}")
        return out


def small_area_index(district, age_class, n_age_classes: int) -> np.ndarray:
    """1-based small-area id for 1-based districts and 0-based age classes."""
    return (np.asarray(district) - 1) * n_age_classes + np.asarray(age_class) + 1


@dataclass(frozen=True)
class UnitRecord:
    responses: tuple[int, ...]
    age: int
    sex: str
    marital_status: str
    district: int
    small_area: int


@dataclass(frozen=True)
class CovariateVector:
    age: int
    sex_dummy: int
    marital_dummies: tuple[int, int, int]

    def __post_init__(self):
        if sum(self.marital_dummies) > 1:
            raise DataError("marital dummies must be mutually exclusive")


def marital_dummies(marital) -> np.ndarray:
    """(n, 3) dummy matrix against the ``single`` reference level."""
    marital = np.asarray(marital, dtype=np.int64)
    out = np.zeros((marital.shape[0], len(MARITAL_LEVELS) - 1))
    for level in range(1, len(MARITAL_LEVELS)):
        out[:, level - 1] = marital == level
    return out


def encode_covariates(unit: UnitRecord) -> CovariateVector:
    sex = SEX_LEVELS.index(unit.sex)
    level = MARITAL_LEVELS.index(unit.marital_status)
    dummies = tuple(int(level == k) for k in range(1, len(MARITAL_LEVELS)))
    return CovariateVector(age=int(unit.age), sex_dummy=sex, marital_dummies=dummies)


@dataclass(frozen=True, eq=False)
class ItemResponseMatrix:
    """Sampled units: ordinal responses plus covariates and area labels.

    ``sex`` is coded 0 = F, 1 = M; ``marital`` indexes :data:`MARITAL_LEVELS`.
    """

    schema: ItemSchema
    responses: np.ndarray
    age: np.ndarray
    sex: np.ndarray
    marital: np.ndarray
    district: np.ndarray
    n_districts: int
    age_classes: AgeClasses = field(default_factory=AgeClasses)

    def __post_init__(self):
        T = self.schema.T
        responses = np.asarray(self.responses, dtype=np.int64).reshape(-1, T)
        n = responses.shape[0]
        for name in ("age", "sex", "marital", "district"):
            col = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if col.shape[0] != n:
                raise DataError(f"column {name!r} has {col.shape[0]} entries, expected {n}")
            object.__setattr__(self, name, _frozen(col, np.int64))
        object.__setattr__(self, "responses", _frozen(responses, np.int64))
        H = self.schema.n_categories
        if n and ((responses < 1) | (responses > H)).any():
            raise DataError("response code outside 1..H_t")
        if n and ((self.sex < 0) | (self.sex > 1)).any():
            raise DataError("sex code outside {0, 1}")
        if n and ((self.marital < 0) | (self.marital >= len(MARITAL_LEVELS))).any():
            raise DataError("marital code outside the known levels")
        if n and ((self.district < 1) | (self.district > self.n_districts)).any():
            raise DataError(f"district id outside 1..{self.n_districts}")

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def T(self) -> int:
        return self.schema.T

    @property
    def D(self) -> int:
        return int(self.n_districts)

    @property
    def J(self) -> int:
        return self.D * self.age_classes.n_classes

    @property
    def age_class(self) -> np.ndarray:
        return self.age_classes.classify(self.age)

    @property
    def small_area(self) -> np.ndarray:
        return small_area_index(self.district, self.age_class, self.age_classes.n_classes)

    @property
    def n_j(self) -> np.ndarray:
        """Per-area sample sizes, indexed by small-area id - 1."""
        return np.bincount(self.small_area - 1, minlength=self.J)

    @property
    def marital_matrix(self) -> np.ndarray:
        return marital_dummies(self.marital)

    def unit(self, i: int) -> UnitRecord:
        return UnitRecord(
            responses=tuple(int(v) for v in self.responses[i]),
            age=int(self.age[i]),
            sex=SEX_LEVELS[self.sex[i]],
            marital_status=MARITAL_LEVELS[self.marital[i]],
            district=int(self.district[i]),
            small_area=int(self.small_area[i]),
        )

    @property
    def units(self) -> list[UnitRecord]:
        return [self.unit(i) for i in range(self.n)]

    def subset(self, idx) -> "ItemResponseMatrix":
        idx = np.asarray(idx)
        return ItemResponseMatrix(
            schema=self.schema,
            responses=self.responses[idx],
            age=self.age[idx],
            sex=self.sex[idx],
            marital=self.marital[idx],
            district=self.district[idx],
            n_districts=self.n_districts,
            age_classes=self.age_classes,
        )


@dataclass(frozen=True, eq=False)
class PopulationCellTable:
    """Population counts per age x sex x marital x district cell."""

    age: np.ndarray
    sex: np.ndarray
    marital: np.ndarray
    district: np.ndarray
    count: np.ndarray
    age_classes: AgeClasses = field(default_factory=AgeClasses)

    def __post_init__(self):
        cols = {}
        for name in ("age", "sex", "marital", "district"):
            cols[name] = _frozen(np.asarray(getattr(self, name)).reshape(-1), np.int64)
        count = _frozen(np.asarray(self.count, dtype=float).reshape(-1), float)
        L = count.shape[0]
        for name, col in cols.items():
            if col.shape[0] != L:
                raise DataError(f"cell column {name!r} has {col.shape[0]} entries, expected {L}")
            object.__setattr__(self, name, col)
        object.__setattr__(self, "count", count)
        if (count < 0).any():
            bad = int(np.flatnonzero(count < 0)[0])
            raise DataError(f"negative count in cell {bad}")
        keys = np.stack([cols["age"], cols["sex"], cols["marital"], cols["district"]], axis=1)
        if L:
            _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
            if (counts > 1).any():
                dup = keys[first[np.argmax(counts > 1)]]
                raise DataError(f"duplicate cell key (age, sex, marital, district) = {tuple(int(v) for v in dup)}")

    @property
    def L(self) -> int:
        return self.count.shape[0]

    @property
    def n_age_classes(self) -> int:
        return self.age_classes.n_classes

    @property
    def age_class(self) -> np.ndarray:
        return self.age_classes.classify(self.age)

    @property
    def small_area(self) -> np.ndarray:
        return small_area_index(self.district, self.age_class, self.n_age_classes)

    @property
    def marital_matrix(self) -> np.ndarray:
        return marital_dummies(self.marital)

    def keys(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.age.tolist(), self.sex.tolist(), self.marital.tolist(), self.district.tolist()))


def _parse_int(text: str, what: str, lineno: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {lineno}: {what} {text!r} is not a number") from None
    if not value.is_integer():
        raise DataError(f"row {lineno}: {what} {text!r} is not an integer")
    return int(value)


def _parse_level(text: str, levels: Sequence[str], what: str, lineno: int) -> int:
    text = text.strip()
    if text not in levels:
        raise DataError(f"row {lineno}: {what} {text!r} not in {list(levels)}")
    return levels.index(text)


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if any(cell.strip() for cell in row)]
    return header, rows


def load_responses(
    path,
    schema: ItemSchema,
    age_classes: AgeClasses = AgeClasses(),
    n_districts: int | None = None,
    age_range: tuple[int, int] | None = None,
) -> ItemResponseMatrix:
    """Read the responses table ``age,sex,marital,district,<items>``.

    Errors name the offending file line.  ``n_districts`` fixes the valid
    district range; when omitted it is the largest id present.
    """
    header, rows = _read_rows(path)
    expected = list(COVARIATE_COLUMNS) + schema.names
    if sorted(header) != sorted(expected) or len(header) != len(expected):
        raise DataError(f"header {header} does not match expected columns {expected}")
    pos = {name: header.index(name) for name in expected}
    if not rows:
        raise DataError("no units")
    H = schema.n_categories
    n = len(rows)
    resp = np.empty((n, schema.T), dtype=np.int64)
    cov = np.empty((n, 4), dtype=np.int64)
    for i, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        age = _parse_int(row[pos["age"]], "age", lineno)
        if age_range is not None and not (age_range[0] <= age <= age_range[1]):
            raise DataError(f"row {lineno}: age {age} outside study range {tuple(age_range)}")
        cov[i] = (
            age,
            _parse_level(row[pos["sex"]], SEX_LEVELS, "sex", lineno),
            _parse_level(row[pos["marital"]], MARITAL_LEVELS, "marital", lineno),
            _parse_int(row[pos["district"]], "district", lineno),
        )
        for t, name in enumerate(schema.names):
            text = row[pos[name]].strip()
            if not text:
                raise DataError(f"row {lineno}: missing response for item {name!r}")
            code = _parse_int(text, f"item {name!r}", lineno)
            if not 1 <= code <= H[t]:
                raise DataError(f"row {lineno}: item {name!r} code {code} outside 1..{H[t]}")
            resp[i, t] = code
    if n_districts is None:
        n_districts = int(cov[:, 3].max())
    bad = np.flatnonzero((cov[:, 3] < 1) | (cov[:, 3] > n_districts))
    if bad.size:
        lineno = rows[bad[0]][0]
        raise DataError(f"row {lineno}: unknown district id {cov[bad[0], 3]} (valid 1..{n_districts})")
    return ItemResponseMatrix(
        schema=schema,
        responses=resp,
        age=cov[:, 0],
        sex=cov[:, 1],
        marital=cov[:, 2],
        district=cov[:, 3],
        n_districts=n_districts,
        age_classes=age_classes,
    )


def write_responses(data: ItemResponseMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(COVARIATE_COLUMNS) + data.schema.names)
        for i in range(data.n):
            writer.writerow(
                [int(data.age[i]), SEX_LEVELS[data.sex[i]], MARITAL_LEVELS[data.marital[i]], int(data.district[i])]
                + data.responses[i].tolist()
            )


def load_population_cells(path, age_classes: AgeClasses = AgeClasses()) -> PopulationCellTable:
    header, rows = _read_rows(path)
    if sorted(header) != sorted(CELL_COLUMNS):
        raise DataError(f"header {header} does not match expected columns {list(CELL_COLUMNS)}")
    pos = {name: header.index(name) for name in CELL_COLUMNS}
    L = len(rows)
    cols = np.empty((L, 4), dtype=np.int64)
    count = np.empty(L)
    for i, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        cols[i] = (
            _parse_int(row[pos["age"]], "age", lineno),
            _parse_level(row[pos["sex"]], SEX_LEVELS, "sex", lineno),
            _parse_level(row[pos["marital"]], MARITAL_LEVELS, "marital", lineno),
            _parse_int(row[pos["district"]], "district", lineno),
        )
        try:
            count[i] = float(row[pos["count"]])
        except ValueError:
            raise DataError(f"row {lineno}: count {row[pos['count']]!r} is not a number") from None
        if count[i] < 0:
            raise DataError(f"row {lineno}: negative count {count[i]}")
    return PopulationCellTable(
        age=cols[:, 0], sex=cols[:, 1], marital=cols[:, 2], district=cols[:, 3], count=count, age_classes=age_classes
    )


def write_population_cells(cells: PopulationCellTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CELL_COLUMNS))
        for i in range(cells.L):
            c = cells.count[i]
            writer.writerow(
                [
                    int(cells.age[i]),
                    SEX_LEVELS[cells.sex[i]],
                    MARITAL_LEVELS[cells.marital[i]],
                    int(cells.district[i]),
                    int(c) if float(c).is_integer() else repr(float(c)),
                ]
            )


@dataclass
class ValidationReport:
    area_counts: np.ndarray  # (D, n_age_classes), sample units per area
    zero_sample_areas: list[int]
    missing_levels: list[str]
    uncovered_units: list[int]
    warnings: list[str]
    age_class_labels: list[str]

    @property
    def ok(self) -> bool:
        return not self.warnings

    def table_rows(self) -> list[list]:
        """Table-1-shaped rows: district then one count per age class."""
        return [[d + 1] + self.area_counts[d].tolist() for d in range(self.area_counts.shape[0])]


def validate_dataset(data: ItemResponseMatrix, cells: PopulationCellTable) -> ValidationReport:
    """Cross-check a sample against its population cells; never raises."""
    warnings: list[str] = []
    A = data.age_classes.n_classes
    area_counts = data.n_j.reshape(data.D, A)
    zero = [int(j) + 1 for j in np.flatnonzero(data.n_j == 0)]
    if zero:
        warnings.append(f"{len(zero)} small areas have no sampled units: {zero}")

    missing: list[str] = []
    for name, levels in (("sex", SEX_LEVELS), ("marital", MARITAL_LEVELS)):
        present = set(np.unique(getattr(data, name)).tolist())
        for code in np.unique(getattr(cells, name)).tolist():
            if code not in present:
                missing.append(f"{name}={levels[code]}")
    sample_districts = set(np.unique(data.district).tolist())
    for d in np.unique(cells.district).tolist():
        if d not in sample_districts:
            missing.append(f"district={d}")
            if d > data.D:
                warnings.append(f"cells reference district {d} but the sample declares only {data.D}")
    if missing:
        warnings.append(f"covariate levels present in cells but absent in sample: {missing}")
    if data.n and cells.L:
        lo, hi = int(data.age.min()), int(data.age.max())
        outside = np.unique(cells.age[(cells.age < lo) | (cells.age > hi)])
        if outside.size:
            warnings.append(f"cell ages {outside.tolist()} outside sampled age range [{lo}, {hi}]")

    cell_keys = set(cells.keys())
    uncovered = [
        i
        for i, key in enumerate(zip(data.age.tolist(), data.sex.tolist(), data.marital.tolist(), data.district.tolist()))
        if key not in cell_keys
    ]
    if uncovered:
        warnings.append(f"{len(uncovered)} sampled units have no population cell")
    return ValidationReport(
        area_counts=area_counts,
        zero_sample_areas=zero,
        missing_levels=missing,
        uncovered_units=uncovered,
        warnings=warnings,
        age_class_labels=data.age_classes.labels(),
    )

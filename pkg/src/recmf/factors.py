"""Decision factors derived from rating records.

Two factor families are supported:

* item features — release year (``RD``), the exact genre combination as one
  categorical value (``GG``), and the size of that combination (``GS``);
* time — the day-of-year index (``DAY``), so records made on the same
  calendar day of any year share a value.

Each factor has a dense vocabulary mapping raw values to ids; augmenting a
dataset attaches one value id per factor to every record.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .datasets import Dataset, RatingRecord, _open_text, _format_rating
from .exceptions import DataWarning, ParseError, ValidationError

#: Reserved label for an item whose release year is absent.
UNKNOWN_YEAR = "unknown"
#: Reserved label for an empty genre combination.
EMPTY_GENRES = "(none)"

# cumulative days before each month in a non-leap year
_CUMDAYS = np.array([0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334])


@dataclass(frozen=True)
class Factor:
    """One decision factor: a name and its dense vocabulary.

    ``labels[id]`` is the display form of value ``id``; ids are dense in
    ``[0, cardinality)``.
    """

    name: str
    labels: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    def id_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"{label!r} not in factor {self.name}") from None


@dataclass(frozen=True)
class FactorSchema:
    """Ordered collection of factors; fixes the layout of augmented records."""

    factors: tuple[Factor, ...]

    def __len__(self) -> int:
        return len(self.factors)

    def __iter__(self) -> Iterator[Factor]:
        return iter(self.factors)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.factors)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no factor named {name!r}; have {self.names}") from None

    def to_json(self) -> str:
        return json.dumps(
            {"factors": [{"name": f.name, "labels": list(f.labels)} for f in self.factors]}
        )

    @classmethod
    def from_json(cls, text: str) -> "FactorSchema":
        obj = json.loads(text)
        return cls(
            factors=tuple(
                Factor(name=f["name"], labels=tuple(f["labels"])) for f in obj["factors"]
            )
        )


@dataclass(frozen=True)
class AugmentedRecord:
    """A rating record plus one vocabulary id per schema factor."""

    base: RatingRecord
    factor_values: tuple[int, ...]


@dataclass
class AugmentedRatings:
    """Columnar augmented records: dataset columns plus a values matrix.

    ``values[n, j]`` is the id of factor ``j``'s value on record ``n``.
    Iterating yields :class:`AugmentedRecord` views.
    """

    name: str
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    values: np.ndarray
    schema: FactorSchema
    n_users: int
    n_items: int

    def __post_init__(self):
        self.users = np.ascontiguousarray(self.users, dtype=np.int32)
        self.items = np.ascontiguousarray(self.items, dtype=np.int32)
        self.ratings = np.ascontiguousarray(self.ratings, dtype=np.float64)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.int32)
        if self.values.shape != (len(self.users), len(self.schema)):
            raise ValidationError(
                f"values matrix has shape {self.values.shape}, "
                f"expected ({len(self.users)}, {len(self.schema)})"
            )
        for j, f in enumerate(self.schema):
            if len(self.values) and self.values[:, j].max(initial=-1) >= f.cardinality:
                raise ValidationError(f"factor {f.name} has a value id >= {f.cardinality}")

    def __len__(self) -> int:
        return self.users.shape[0]

    def record(self, i: int) -> AugmentedRecord:
        base = RatingRecord(
            int(self.users[i]), int(self.items[i]), float(self.ratings[i]), int(self.timestamps[i])
        )
        return AugmentedRecord(base, tuple(int(v) for v in self.values[i]))

    def __iter__(self) -> Iterator[AugmentedRecord]:
        return (self.record(i) for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> "AugmentedRatings":
        return AugmentedRatings(
            name=self.name,
            users=self.users[idx],
            items=self.items[idx],
            ratings=self.ratings[idx],
            timestamps=self.timestamps[idx],
            values=self.values[idx],
            schema=self.schema,
            n_users=self.n_users,
            n_items=self.n_items,
        )

    @classmethod
    def plain(cls, dataset: Dataset) -> "AugmentedRatings":
        """Wrap a dataset with an empty schema (no factors)."""
        return cls(
            name=dataset.name,
            users=dataset.users,
            items=dataset.items,
            ratings=dataset.ratings,
            timestamps=dataset.timestamps,
            values=np.empty((len(dataset), 0), dtype=np.int32),
            schema=FactorSchema(factors=()),
            n_users=dataset.n_users,
            n_items=dataset.n_items,
        )


def _warn_if_dense(factor: Factor, n_items: int) -> None:
    # the interaction model expects each per-factor matrix to be denser than
    # the rating matrix, which needs |D_j| well below |I|
    if n_items and factor.cardinality >= n_items:
        warnings.warn(
            f"factor {factor.name} has cardinality {factor.cardinality} >= item count "
            f"{n_items}; its interaction matrix will be no denser than the rating matrix",
            DataWarning,
            stacklevel=3,
        )


def extract_feature_factors(dataset: Dataset) -> AugmentedRatings:
    """Attach the item-feature factors RD, GG, GS to every record.

    RD is the release year as a categorical value (reserved ``unknown`` entry
    for items without one).  GG treats each distinct genre combination as a
    single value, with the empty combination reserved.  GS is the size of the
    combination.  Items missing from the metadata map count as unknown year
    and empty genres.
    """
    years: list[int | None] = []
    gsets: list[tuple[str, ...]] = []
    missing = 0
    for i in range(dataset.n_items):
        meta = dataset.item_meta.get(i)
        if meta is None:
            missing += 1
            years.append(None)
            gsets.append(())
        else:
            years.append(meta.release_year)
            gsets.append(tuple(sorted(meta.genres)))
    if missing:
        warnings.warn(
            f"{missing} item(s) have no metadata; using unknown year and empty genres",
            DataWarning,
            stacklevel=2,
        )

    known_years = sorted({y for y in years if y is not None})
    rd = Factor("RD", tuple(str(y) for y in known_years) + (UNKNOWN_YEAR,))
    year_id = {y: j for j, y in enumerate(known_years)}
    rd_of_item = np.array(
        [year_id[y] if y is not None else len(known_years) for y in years], dtype=np.int32
    )

    combos = sorted(set(gsets) | {()})
    gg = Factor("GG", tuple("|".join(c) if c else EMPTY_GENRES for c in combos))
    combo_id = {c: j for j, c in enumerate(combos)}
    gg_of_item = np.array([combo_id[c] for c in gsets], dtype=np.int32)

    sizes = sorted({len(c) for c in gsets} | {0})
    gs = Factor("GS", tuple(str(s) for s in sizes))
    size_id = {s: j for j, s in enumerate(sizes)}
    gs_of_item = np.array([size_id[len(c)] for c in gsets], dtype=np.int32)

    schema = FactorSchema(factors=(rd, gg, gs))
    for f in schema:
        _warn_if_dense(f, dataset.n_items)

    values = np.column_stack(
        (rd_of_item[dataset.items], gg_of_item[dataset.items], gs_of_item[dataset.items])
    )
    return AugmentedRatings(
        name=dataset.name,
        users=dataset.users,
        items=dataset.items,
        ratings=dataset.ratings,
        timestamps=dataset.timestamps,
        values=values,
        schema=schema,
        n_users=dataset.n_users,
        n_items=dataset.n_items,
    )


def day_of_year(timestamp: int) -> int:
    """Ordinal day in [1, 366] of the timestamp's UTC calendar date.

    The mapping depends only on (month, day): the same date in any year gets
    the same index, with Feb 29 assigned the extra slot 366.  Dec 31 is
    therefore always 365.
    """
    return int(day_of_year_array(np.asarray([timestamp]))[0])


def day_of_year_array(timestamps: np.ndarray) -> np.ndarray:
    """Vectorized :func:`day_of_year`."""
    ts = np.asarray(timestamps, dtype=np.int64).astype("datetime64[s]")
    month0 = ts.astype("datetime64[M]")
    months = month0.astype(np.int64) % 12 + 1
    days = (ts.astype("datetime64[D]") - month0.astype("datetime64[D]")).astype(np.int64) + 1
    doy = _CUMDAYS[months - 1] + days
    doy[(months == 2) & (days == 29)] = 366
    return doy.astype(np.int32)


def extract_temporal_factor(dataset: Dataset) -> AugmentedRatings:
    """Attach the single day-of-year factor DAY to every record.

    The vocabulary always covers all 366 day indices, so a date never seen in
    training still has parameters at prediction time.
    """
    day = Factor("DAY", tuple(str(d) for d in range(1, 367)))
    values = (day_of_year_array(dataset.timestamps) - 1).reshape(-1, 1)
    schema = FactorSchema(factors=(day,))
    _warn_if_dense(day, dataset.n_items)
    return AugmentedRatings(
        name=dataset.name,
        users=dataset.users,
        items=dataset.items,
        ratings=dataset.ratings,
        timestamps=dataset.timestamps,
        values=values,
        schema=schema,
        n_users=dataset.n_users,
        n_items=dataset.n_items,
    )


def factor_rating_stats(
    records: AugmentedRatings, factor: str
) -> list[tuple[str, int, float]]:
    """Per-value rating statistics for one factor.

    Returns ``(value label, count, mean rating)`` rows, one per observed
    value, ordered by value id (vocabulary order).
    """
    j = records.schema.index(factor)  # KeyError on unknown name
    f = records.schema.factors[j]
    ids = records.values[:, j]
    counts = np.bincount(ids, minlength=f.cardinality)
    sums = np.bincount(ids, weights=records.ratings, minlength=f.cardinality)
    rows = []
    for v in range(f.cardinality):
        if counts[v]:
            rows.append((f.labels[v], int(counts[v]), float(sums[v] / counts[v])))
    return rows


def write_factor_stats(rows: Sequence[tuple[str, int, float]], path) -> None:
    """Write a stats table as CSV with header ``factor_value,count,mean_rating``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("factor_value,count,mean_rating\n")
        for label, count, mean in rows:
            fh.write(f"{label},{count},{mean:.6g}\n")


def write_augmented(records: AugmentedRatings, path) -> None:
    """Write augmented records: ``user item d_1 ... d_|D| rating timestamp``,
    tab-separated, one record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(records)):
            vals = "\t".join(str(v) for v in records.values[i])
            mid = f"{vals}\t" if vals else ""
            fh.write(
                f"{records.users[i]}\t{records.items[i]}\t{mid}"
                f"{_format_rating(records.ratings[i])}\t{records.timestamps[i]}\n"
            )


def read_augmented(
    path,
    schema: FactorSchema,
    *,
    name: str = "",
    n_users: int | None = None,
    n_items: int | None = None,
) -> AugmentedRatings:
    """Read an augmented-record file written by :func:`write_augmented`."""
    width = 4 + len(schema)
    users, items, ratings, stamps = [], [], [], []
    values = []
    with _open_text(path, "utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise ParseError(f"expected {width} tab-separated fields, got {len(parts)}", lineno)
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                values.append([int(v) for v in parts[2:-2]])
                ratings.append(float(parts[-2]))
                stamps.append(int(parts[-1]))
            except ValueError:
                raise ParseError(f"malformed row {line!r}", lineno) from None
    if not users:
        raise ParseError("no augmented rows found", None)
    users_arr = np.asarray(users, dtype=np.int32)
    items_arr = np.asarray(items, dtype=np.int32)
    return AugmentedRatings(
        name=name,
        users=users_arr,
        items=items_arr,
        ratings=np.asarray(ratings),
        timestamps=np.asarray(stamps),
        values=np.asarray(values, dtype=np.int32).reshape(len(users), len(schema)),
        schema=schema,
        n_users=int(users_arr.max()) + 1 if n_users is None else n_users,
        n_items=int(items_arr.max()) + 1 if n_items is None else n_items,
    )

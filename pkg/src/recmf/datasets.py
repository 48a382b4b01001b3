"""MovieLens ingestion, normalized record files, and evaluation splits.

Supports the two public MovieLens layouts:

* 100k: tab-separated ``u.data`` plus pipe-separated ``u.item`` with a
  release date and 19 trailing binary genre flags;
* 1M: ``::``-separated ``ratings.dat`` / ``movies.dat`` with the release
  year embedded in the title as ``(YYYY)`` and ``|``-separated genre names.

User and item ids are re-indexed densely; the original ids are retained on
the :class:`Dataset` so external ids can always be recovered.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np

from .exceptions import DataWarning, ParseError, ValidationError

#: Genre names for the 19 binary flag columns of ``u.item``, in file order.
#: The ML100k distribution declares these in ``u.genre``; the list here is the
#: default for when only ``u.item`` is available.
ML100K_GENRES = (
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
)

RATING_MIN = 1.0
RATING_MAX = 5.0


@dataclass(frozen=True)
class RatingRecord:
    """One observed (user, item, rating, timestamp) tuple with dense ids."""

    user: int
    item: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class ItemMetadata:
    """Per-item side information: release year (may be absent) and genres."""

    item: int
    release_year: int | None
    genres: frozenset[str]


@dataclass
class Dataset:
    """A sparse rating dataset in columnar form.

    ``users``/``items`` hold dense indices in ``[0, n_users)`` / ``[0,
    n_items)``; ``user_ids``/``item_ids`` map a dense index back to the
    original file id.
    """

    name: str
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    item_meta: dict[int, ItemMetadata] = field(default_factory=dict)
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    genre_vocabulary: tuple[str, ...] = ()

    def __post_init__(self):
        self.users = np.ascontiguousarray(self.users, dtype=np.int32)
        self.items = np.ascontiguousarray(self.items, dtype=np.int32)
        self.ratings = np.ascontiguousarray(self.ratings, dtype=np.float64)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)

    def __len__(self) -> int:
        return self.users.shape[0]

    @property
    def n_records(self) -> int:
        return len(self)

    @property
    def density(self) -> float:
        """Fraction of the user-item matrix that is observed."""
        return len(self) / (self.n_users * self.n_items)

    def record(self, i: int) -> RatingRecord:
        return RatingRecord(
            int(self.users[i]), int(self.items[i]), float(self.ratings[i]), int(self.timestamps[i])
        )

    def __iter__(self) -> Iterator[RatingRecord]:
        return (self.record(i) for i in range(len(self)))

    def user_index(self) -> dict[int, int]:
        """Original user id -> dense index."""
        if self.user_ids is None:
            return {u: u for u in range(self.n_users)}
        return {int(orig): dense for dense, orig in enumerate(self.user_ids)}

    def item_index(self) -> dict[int, int]:
        """Original item id -> dense index."""
        if self.item_ids is None:
            return {i: i for i in range(self.n_items)}
        return {int(orig): dense for dense, orig in enumerate(self.item_ids)}


def _open_text(src, encoding: str) -> TextIO:
    if isinstance(src, (str, Path)):
        return open(src, "r", encoding=encoding, newline="")
    if isinstance(src, (bytes, bytearray)):
        return io.TextIOWrapper(io.BytesIO(src), encoding=encoding, newline="")
    if hasattr(src, "read"):
        data = src.read()
        if isinstance(data, bytes):
            return io.TextIOWrapper(io.BytesIO(data), encoding=encoding, newline="")
        return io.StringIO(data)
    raise TypeError(f"cannot read from {type(src).__name__}")


def _check_rating(value: str, line: int) -> float:
    try:
        r = float(value)
    except ValueError:
        raise ParseError(f"rating {value!r} is not a number", line) from None
    if not (RATING_MIN <= r <= RATING_MAX):
        raise ValidationError(f"line {line}: rating {r} outside [{RATING_MIN:g}, {RATING_MAX:g}]")
    return r


def _densify(raw_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map raw ids to dense indices (sorted original order) and return both."""
    uniq, dense = np.unique(raw_ids, return_inverse=True)
    return dense.astype(np.int32), uniq


def _parse_rating_rows(fh: TextIO, sep: str) -> tuple[np.ndarray, ...]:
    raw_u, raw_i, ratings, stamps = [], [], [], []
    for lineno, line in enumerate(fh, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields separated by {sep!r}, got {len(parts)}", lineno)
        try:
            u = int(parts[0])
            i = int(parts[1])
            t = int(parts[3])
        except ValueError:
            raise ParseError(f"malformed row {line!r}", lineno) from None
        r = _check_rating(parts[2], lineno)
        if t < 0:
            raise ParseError(f"negative timestamp {t}", lineno)
        raw_u.append(u)
        raw_i.append(i)
        ratings.append(r)
        stamps.append(t)
    if not raw_u:
        raise ParseError("no rating rows found", None)
    return (
        np.asarray(raw_u, dtype=np.int64),
        np.asarray(raw_i, dtype=np.int64),
        np.asarray(ratings, dtype=np.float64),
        np.asarray(stamps, dtype=np.int64),
    )


def parse_ml100k(data_file, item_file, genre_names: tuple[str, ...] = ML100K_GENRES) -> Dataset:
    """Parse the ML100k ``u.data`` / ``u.item`` pair into a :class:`Dataset`.

    Parameters
    ----------
    data_file:
        Path, bytes, or open handle for the tab-separated rating file
        (``user item rating timestamp``).
    item_file:
        Path, bytes, or open handle for the pipe-separated item file; each row
        carries a release date and one binary flag per genre name.
    genre_names:
        Names of the genre flag columns, in file order.  Pass the contents of
        ``u.genre`` to override the bundled default.

    Raises
    ------
    ParseError
        On a malformed row, naming the line number.
    ValidationError
        On a rating outside the [1, 5] scale.
    """
    with _open_text(data_file, "latin-1") as fh:
        raw_u, raw_i, ratings, stamps = _parse_rating_rows(fh, "\t")
    users, user_ids = _densify(raw_u)
    items, item_ids = _densify(raw_i)
    item_lookup = {int(orig): dense for dense, orig in enumerate(item_ids)}

    n_flags = len(genre_names)
    meta: dict[int, ItemMetadata] = {}
    with _open_text(item_file, "latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 5 + n_flags:
                raise ParseError(
                    f"expected {5 + n_flags} pipe-separated fields, got {len(parts)}", lineno
                )
            try:
                raw_id = int(parts[0])
            except ValueError:
                raise ParseError(f"bad item id {parts[0]!r}", lineno) from None
            dense = item_lookup.get(raw_id)
            if dense is None:
                continue  # metadata for an unrated item
            year = _parse_ml100k_year(parts[2], lineno)
            genres = set()
            for name, flag in zip(genre_names, parts[5:]):
                if flag == "1":
                    genres.add(name)
                elif flag != "0":
                    raise ParseError(f"genre flag {flag!r} is not 0/1", lineno)
            if not genres:
                warnings.warn(
                    f"item {raw_id} has no genre flags set; keeping empty genre set",
                    DataWarning,
                    stacklevel=2,
                )
            meta[dense] = ItemMetadata(dense, year, frozenset(genres))

    return Dataset(
        name="ml100k",
        users=users,
        items=items,
        ratings=ratings,
        timestamps=stamps,
        n_users=len(user_ids),
        n_items=len(item_ids),
        item_meta=meta,
        user_ids=user_ids,
        item_ids=item_ids,
        genre_vocabulary=tuple(genre_names),
    )


def _parse_ml100k_year(date_field: str, lineno: int) -> int | None:
    # release dates look like "01-Jan-1995"; the field may be empty
    if not date_field:
        warnings.warn(f"line {lineno}: missing release date", DataWarning, stacklevel=3)
        return None
    try:
        return int(date_field.rsplit("-", 1)[-1])
    except ValueError:
        raise ParseError(f"bad release date {date_field!r}", lineno) from None


def parse_ml1m(ratings_file, movies_file) -> Dataset:
    """Parse the ML1m ``ratings.dat`` / ``movies.dat`` pair into a :class:`Dataset`.

    Release years come from the ``(YYYY)`` suffix of each movie title; a title
    without one keeps the movie but leaves the year absent (with a warning).
    The genre vocabulary is collected from the files themselves.
    """
    with _open_text(ratings_file, "latin-1") as fh:
        raw_u, raw_i, ratings, stamps = _parse_rating_rows(fh, "::")
    users, user_ids = _densify(raw_u)
    items, item_ids = _densify(raw_i)
    item_lookup = {int(orig): dense for dense, orig in enumerate(item_ids)}

    meta: dict[int, ItemMetadata] = {}
    all_genres: set[str] = set()
    with _open_text(movies_file, "latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 3:
                raise ParseError(f"expected 3 '::'-separated fields, got {len(parts)}", lineno)
            try:
                raw_id = int(parts[0])
            except ValueError:
                raise ParseError(f"bad movie id {parts[0]!r}", lineno) from None
            dense = item_lookup.get(raw_id)
            title = parts[1]
            year = _year_from_title(title)
            if year is None:
                warnings.warn(
                    f"line {lineno}: no (YYYY) year in title {title!r}",
                    DataWarning,
                    stacklevel=2,
                )
            genres = frozenset(g for g in parts[2].split("|") if g)
            all_genres.update(genres)
            if dense is not None:
                meta[dense] = ItemMetadata(dense, year, genres)

    return Dataset(
        name="ml1m",
        users=users,
        items=items,
        ratings=ratings,
        timestamps=stamps,
        n_users=len(user_ids),
        n_items=len(item_ids),
        item_meta=meta,
        user_ids=user_ids,
        item_ids=item_ids,
        genre_vocabulary=tuple(sorted(all_genres)),
    )


def _year_from_title(title: str) -> int | None:
    title = title.rstrip()
    if title.endswith(")"):
        start = title.rfind("(")
        inner = title[start + 1 : -1]
        if start >= 0 and len(inner) == 4 and inner.isdigit():
            return int(inner)
    return None


def _format_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def write_records(dataset: Dataset, path) -> None:
    """Write the normalized record file: one ``user<TAB>item<TAB>rating<TAB>timestamp``
    line per record, UTF-8 with LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(dataset)):
            fh.write(
                f"{dataset.users[i]}\t{dataset.items[i]}\t"
                f"{_format_rating(dataset.ratings[i])}\t{dataset.timestamps[i]}\n"
            )


def read_records(
    path, *, name: str = "", n_users: int | None = None, n_items: int | None = None
) -> Dataset:
    """Read a normalized record file back into a :class:`Dataset`.

    Ids in the file are already dense; counts default to ``max index + 1``.
    """
    with _open_text(path, "utf-8") as fh:
        users, items, ratings, stamps = _parse_rating_rows(fh, "\t")
    if users.min() < 0 or items.min() < 0:
        raise ValidationError("normalized records must use non-negative dense ids")
    return Dataset(
        name=name,
        users=users,
        items=items,
        ratings=ratings,
        timestamps=stamps,
        n_users=int(users.max()) + 1 if n_users is None else n_users,
        n_items=int(items.max()) + 1 if n_items is None else n_items,
    )


@dataclass
class SplitPlan:
    """A train/validation partition of a dataset's record indices.

    ``kind`` is ``"k-fold"`` (with ``fold_of`` assigning each record to a
    fold) or ``"all-but-two"`` (with explicit ``train_idx`` / ``val_idx``).
    """

    kind: str
    k: int = 0
    fold_of: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    def train_indices(self, fold: int | None = None) -> np.ndarray:
        if self.kind == "k-fold":
            if fold is None:
                raise ValueError("k-fold plan needs a fold number")
            return np.nonzero(self.fold_of != fold)[0]
        return self.train_idx

    def val_indices(self, fold: int | None = None) -> np.ndarray:
        if self.kind == "k-fold":
            if fold is None:
                raise ValueError("k-fold plan needs a fold number")
            return np.nonzero(self.fold_of == fold)[0]
        return self.val_idx


def make_kfold_split(dataset: Dataset, k: int, seed: int) -> SplitPlan:
    """Assign every record to one of ``k`` folds, sizes differing by at most 1.

    Deterministic for a fixed ``(dataset, k, seed)``; fold ``f`` is the
    validation set of round ``f`` and the other folds are its training set.
    """
    n = len(dataset)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of records ({n})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int32)
    fold_of[perm] = np.arange(n, dtype=np.int32) % k
    return SplitPlan(kind="k-fold", k=k, fold_of=fold_of)


def make_all_but_two_split(dataset: Dataset) -> SplitPlan:
    """Hold out each user's two most recent records as the validation set.

    Timestamp ties break by file order (the later row counts as more
    recent).  Users with fewer than 3 records keep everything in training,
    so no user is ever validated without training history.
    """
    n = len(dataset)
    # sort by (user, timestamp, row); the last two rows per user group are V
    order = np.lexsort((np.arange(n), dataset.timestamps, dataset.users))
    sorted_users = dataset.users[order]
    boundaries = np.nonzero(np.diff(sorted_users))[0] + 1
    groups = np.split(order, boundaries)
    val_parts = [g[-2:] for g in groups if len(g) >= 3]
    if val_parts:
        val_idx = np.sort(np.concatenate(val_parts))
    else:
        val_idx = np.empty(0, dtype=np.int64)
    mask = np.ones(n, dtype=bool)
    mask[val_idx] = False
    train_idx = np.nonzero(mask)[0]
    return SplitPlan(kind="all-but-two", train_idx=train_idx, val_idx=val_idx)

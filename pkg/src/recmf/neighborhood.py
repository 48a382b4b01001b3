"""User- and item-based neighborhood baselines.

Similarity is cosine over co-rated entries only, in two variants:

* ``standard`` — sum(x*y) / (||x|| * ||y||), with both norms restricted to
  the common coordinates;
* ``literal`` — sum(x*y) / sqrt(sum(x^2 * y^2)), keeping the squared
  products under a single root.  Over positive co-ratings this is the L1/L2
  norm ratio of the products, so it lies in [1, sqrt(n)] rather than [0, 1];
  it exists for fidelity with the printed formula and is off by default.

Each entity keeps its top-25% most similar positive-similarity neighbors;
prediction is the entity's mean plus a similarity-weighted average of the
neighbors' mean-centered ratings, clamped to the rating scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import _kernels
from .datasets import RATING_MAX, RATING_MIN, Dataset
from .factors import AugmentedRatings

VARIANTS = ("standard", "literal")


@dataclass
class RatingIndex:
    """Training ratings indexed both ways, with per-entity means.

    Rows are CSR-style: user ``u``'s ratings sit at
    ``[user_indptr[u], user_indptr[u+1])`` of ``user_items``/``user_ratings``
    sorted by item id, and mirrored for items.  Entities with no training
    ratings have NaN means.
    """

    n_users: int
    n_items: int
    user_indptr: np.ndarray
    user_items: np.ndarray
    user_ratings: np.ndarray
    item_indptr: np.ndarray
    item_users: np.ndarray
    item_ratings: np.ndarray
    user_means: np.ndarray
    item_means: np.ndarray
    global_mean: float

    @classmethod
    def from_records(
        cls, users: np.ndarray, items: np.ndarray, ratings: np.ndarray,
        n_users: int, n_items: int,
    ) -> "RatingIndex":
        users = np.asarray(users, dtype=np.int32)
        items = np.asarray(items, dtype=np.int32)
        ratings = np.asarray(ratings, dtype=np.float64)
        if len(users) == 0:
            raise ValueError("cannot index zero ratings")

        by_user = np.lexsort((items, users))
        u_counts = np.bincount(users, minlength=n_users)
        user_indptr = np.concatenate(([0], np.cumsum(u_counts))).astype(np.int64)
        by_item = np.lexsort((users, items))
        i_counts = np.bincount(items, minlength=n_items)
        item_indptr = np.concatenate(([0], np.cumsum(i_counts))).astype(np.int64)

        with np.errstate(invalid="ignore"):
            user_means = np.bincount(users, weights=ratings, minlength=n_users) / u_counts
            item_means = np.bincount(items, weights=ratings, minlength=n_items) / i_counts
        return cls(
            n_users=n_users,
            n_items=n_items,
            user_indptr=user_indptr,
            user_items=items[by_user].astype(np.int32),
            user_ratings=ratings[by_user],
            item_indptr=item_indptr,
            item_users=users[by_item].astype(np.int32),
            item_ratings=ratings[by_item],
            user_means=user_means,
            item_means=item_means,
            global_mean=float(ratings.mean()),
        )

    def user_row(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.user_indptr[u], self.user_indptr[u + 1])
        return self.user_items[s], self.user_ratings[s]

    def item_row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.item_indptr[i], self.item_indptr[i + 1])
        return self.item_users[s], self.item_ratings[s]


def _pair_cosine(xi, xr, yi, yr, variant: str) -> float:
    common, ia, ib = np.intersect1d(xi, yi, assume_unique=True, return_indices=True)
    if common.size == 0:
        return 0.0
    x = xr[ia]
    y = yr[ib]
    num = float(np.dot(x, y))
    if variant == "standard":
        den = float(np.sqrt(np.dot(x, x)) * np.sqrt(np.dot(y, y)))
        # round-off can push a near-parallel pair a few ulp above 1
        return min(num / den, 1.0) if den > 0 else 0.0
    den = float(np.sqrt(np.dot(x * x, y * y)))
    return num / den if den > 0 else 0.0


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


def cosine_similarity_users(index: RatingIndex, u: int, v: int, variant: str = "standard") -> float:
    """Cosine similarity between two users over their common items (0 if none)."""
    _check_variant(variant)
    if u == v:
        raise ValueError("u and v must differ")
    xi, xr = index.user_row(u)
    yi, yr = index.user_row(v)
    return _pair_cosine(xi, xr, yi, yr, variant)


def cosine_similarity_items(index: RatingIndex, i: int, j: int, variant: str = "standard") -> float:
    """Cosine similarity between two items over their common raters (0 if none)."""
    _check_variant(variant)
    if i == j:
        raise ValueError("i and j must differ")
    xi, xr = index.item_row(i)
    yi, yr = index.item_row(j)
    return _pair_cosine(xi, xr, yi, yr, variant)


def _retained_lists(
    indptr, indices, data, other_indptr, other_indices, other_data,
    variant: str, top_fraction: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-entity top-fraction neighbor lists as CSR sorted by neighbor id.

    The retained count is ceil(top_fraction x number of positive-similarity
    neighbors); ranking is by descending similarity, ties by ascending id.
    """
    n = indptr.shape[0] - 1
    rows_idx: list[np.ndarray] = []
    rows_sim: list[np.ndarray] = []
    nbr_indptr = np.zeros(n + 1, dtype=np.int64)
    for e in range(n):
        dot, sq_self, sq_other, sqprod, counts = _kernels.corating_sums(
            indptr, indices, data, other_indptr, other_indices, other_data, e
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            if variant == "standard":
                den = np.sqrt(sq_self) * np.sqrt(sq_other)
            else:
                den = np.sqrt(sqprod)
            sims = np.where((counts > 0) & (den > 0), dot / den, 0.0)
        if variant == "standard":
            np.minimum(sims, 1.0, out=sims)
        pos = np.flatnonzero(sims > 0)
        if pos.size:
            keep_n = math.ceil(top_fraction * pos.size)
            ranked = pos[np.lexsort((pos, -sims[pos]))[:keep_n]]
            by_id = np.sort(ranked)
            rows_idx.append(by_id.astype(np.int32))
            rows_sim.append(sims[by_id])
        else:
            rows_idx.append(np.empty(0, dtype=np.int32))
            rows_sim.append(np.empty(0))
        nbr_indptr[e + 1] = nbr_indptr[e] + rows_idx[-1].size
    return (
        nbr_indptr,
        np.concatenate(rows_idx) if rows_idx else np.empty(0, dtype=np.int32),
        np.concatenate(rows_sim) if rows_sim else np.empty(0),
    )


class _BaseKNN(BaseEstimator):
    """Shared machinery: index construction, neighbor lists, prediction."""

    def __init__(self, top_fraction=0.25, variant="standard"):
        self.top_fraction = top_fraction
        self.variant = variant

    def _extract(self, X):
        if isinstance(X, (Dataset, AugmentedRatings)):
            return X.users, X.items, X.ratings, X.n_users, X.n_items
        raise TypeError(f"expected Dataset or AugmentedRatings, got {type(X).__name__}")

    def fit(self, X):
        """Index the training ratings and precompute retained neighbor lists."""
        _check_variant(self.variant)
        if not (0 < self.top_fraction <= 1):
            raise ValueError(f"top_fraction must be in (0, 1], got {self.top_fraction}")
        users, items, ratings, n_users, n_items = self._extract(X)
        idx = RatingIndex.from_records(users, items, ratings, n_users, n_items)
        self.index_ = idx
        if self._kind == "user-based":
            args = (idx.user_indptr, idx.user_items, idx.user_ratings,
                    idx.item_indptr, idx.item_users, idx.item_ratings)
        else:
            args = (idx.item_indptr, idx.item_users, idx.item_ratings,
                    idx.user_indptr, idx.user_items, idx.user_ratings)
        self.nbr_indptr_, self.nbr_indices_, self.nbr_sims_ = _retained_lists(
            *args, self.variant, self.top_fraction
        )
        return self

    def neighbors(self, entity: int) -> list[tuple[int, float]]:
        """Retained (neighbor, similarity) list, descending similarity."""
        s = slice(self.nbr_indptr_[entity], self.nbr_indptr_[entity + 1])
        ids = self.nbr_indices_[s]
        sims = self.nbr_sims_[s]
        order = np.lexsort((ids, -sims))
        return [(int(ids[k]), float(sims[k])) for k in order]

    def _predict_arrays(self, targets, companions) -> np.ndarray:
        idx = self.index_
        if self._kind == "user-based":
            comp = (idx.item_indptr, idx.item_users, idx.item_ratings)
            target_means = idx.user_means
            # an unknown user falls straight back to the global mean
            fallback = np.full(idx.n_items, np.nan)
        else:
            comp = (idx.user_indptr, idx.user_items, idx.user_ratings)
            target_means = idx.item_means
            fallback = idx.user_means
        out = np.empty(len(targets))
        _kernels.neighbor_predict(
            np.ascontiguousarray(targets, dtype=np.int32),
            np.ascontiguousarray(companions, dtype=np.int32),
            self.nbr_indptr_, self.nbr_indices_, self.nbr_sims_,
            *comp, target_means, fallback, self.index_.global_mean,
            RATING_MIN, RATING_MAX, out,
        )
        return out

    def predict(self, X) -> np.ndarray:
        """Predicted ratings for the (user, item) pairs in ``X``, in [1, 5]."""
        users, items, _, _, _ = self._extract(X)
        if self._kind == "user-based":
            return self._predict_arrays(users, items)
        return self._predict_arrays(items, users)

    def predict_one(self, user: int, item: int) -> float:
        if self._kind == "user-based":
            return float(self._predict_arrays(np.asarray([user]), np.asarray([item]))[0])
        return float(self._predict_arrays(np.asarray([item]), np.asarray([user]))[0])


class UserCF(_BaseKNN):
    """User-based CF: r̂_ui = r̄_u + weighted average of (r_vi − r̄_v) over
    u's retained neighbors v who rated i."""

    _kind = "user-based"


class ItemCF(_BaseKNN):
    """Item-based CF: r̂_ui = r̄_i + weighted average of (r_uj − r̄_j) over
    u's rated items j in i's retained neighbor list."""

    _kind = "item-based"


def write_similarity_cache(model: _BaseKNN, path) -> None:
    """One line per entity: ``entity neighbor:sim neighbor:sim ...``,
    entities ascending, neighbors in descending-similarity order."""
    n = len(model.nbr_indptr_) - 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in range(n):
            parts = [str(e)] + [f"{v}:{s!r}" for v, s in model.neighbors(e)]
            fh.write(" ".join(parts) + "\n")


def read_similarity_cache(path) -> dict[int, list[tuple[int, float]]]:
    """Parse a cache file back into {entity: [(neighbor, sim), ...]}."""
    out: dict[int, list[tuple[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            head, *rest = line.split(" ")
            out[int(head)] = [
                (int(tok.split(":")[0]), float(tok.split(":")[1])) for tok in rest
            ]
    return out

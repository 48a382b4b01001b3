"""Shared fixtures: synthetic MovieLens-format files and real-data discovery.

Real datasets are looked up under ``$RECMF_DATA_ROOT`` (default ``./data``),
expecting the stock archive layouts ``ml-100k/u.data`` etc.  Tests that need
the real files skip when they are absent; everything else runs on synthetic
data generated here.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from recmf.datasets import ML100K_GENRES, Dataset

DATA_ROOT = Path(os.environ.get("RECMF_DATA_ROOT", "data"))
ML100K_DIR = DATA_ROOT / "ml-100k"
ML1M_DIR = DATA_ROOT / "ml-1m"

ml100k_available = (ML100K_DIR / "u.data").exists() and (ML100K_DIR / "u.item").exists()
ml1m_available = (ML1M_DIR / "ratings.dat").exists() and (ML1M_DIR / "movies.dat").exists()

needs_ml100k = pytest.mark.skipif(not ml100k_available, reason="ML100k data not present")
needs_ml1m = pytest.mark.skipif(not ml1m_available, reason="ML1m data not present")


@pytest.fixture(scope="session")
def ml100k_paths():
    if not ml100k_available:
        pytest.skip("ML100k data not present")
    return ML100K_DIR / "u.data", ML100K_DIR / "u.item"


@pytest.fixture(scope="session")
def ml1m_paths():
    if not ml1m_available:
        pytest.skip("ML1m data not present")
    return ML1M_DIR / "ratings.dat", ML1M_DIR / "movies.dat"


# ---------------------------------------------------------------------------
# synthetic raw files in the two MovieLens layouts


def synth_ml100k_files(
    tmpdir: Path,
    n_users: int = 30,
    n_items: int = 40,
    n_ratings: int = 400,
    seed: int = 7,
    genre_names=ML100K_GENRES,
) -> tuple[Path, Path]:
    """Write a small u.data/u.item pair with the real files' shape."""
    rng = np.random.default_rng(seed)
    pairs = set()
    rows = []
    while len(rows) < n_ratings:
        u = int(rng.integers(1, n_users + 1))
        i = int(rng.integers(1, n_items + 1))
        if (u, i) in pairs:
            continue
        pairs.add((u, i))
        r = int(rng.integers(1, 6))
        t = int(rng.integers(874_000_000, 893_000_000))
        rows.append(f"{u}\t{i}\t{r}\t{t}")
    data_path = tmpdir / "u.data"
    data_path.write_text("\n".join(rows) + "\n", encoding="latin-1")

    months = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
    item_rows = []
    for i in range(1, n_items + 1):
        year = int(rng.integers(1930, 1999))
        day = int(rng.integers(1, 29))
        month = months[int(rng.integers(0, 12))]
        flags = np.zeros(len(genre_names), dtype=int)
        for g in rng.choice(len(genre_names), size=int(rng.integers(1, 4)), replace=False):
            flags[g] = 1
        flag_str = "|".join(str(f) for f in flags)
        item_rows.append(
            f"{i}|Movie {i} ({year})|{day:02d}-{month}-{year}||http://example.org/{i}|{flag_str}"
        )
    item_path = tmpdir / "u.item"
    item_path.write_text("\n".join(item_rows) + "\n", encoding="latin-1")
    return data_path, item_path


def synth_ml1m_files(
    tmpdir: Path, n_users: int = 25, n_items: int = 30, n_ratings: int = 300, seed: int = 11
) -> tuple[Path, Path]:
    """Write a small ratings.dat/movies.dat pair with the real files' shape."""
    rng = np.random.default_rng(seed)
    pairs = set()
    rows = []
    while len(rows) < n_ratings:
        u = int(rng.integers(1, n_users + 1))
        i = int(rng.integers(1, n_items + 1))
        if (u, i) in pairs:
            continue
        pairs.add((u, i))
        r = int(rng.integers(1, 6))
        t = int(rng.integers(956_000_000, 1_046_000_000))
        rows.append(f"{u}::{i}::{r}::{t}")
    ratings_path = tmpdir / "ratings.dat"
    ratings_path.write_text("\n".join(rows) + "\n", encoding="latin-1")

    genre_pool = ("Action", "Comedy", "Drama", "Horror", "Romance", "Sci-Fi", "Thriller")
    movie_rows = []
    for i in range(1, n_items + 1):
        year = int(rng.integers(1940, 2001))
        k = int(rng.integers(1, 4))
        genres = "|".join(sorted(rng.choice(genre_pool, size=k, replace=False)))
        movie_rows.append(f"{i}::Film {i} ({year})::{genres}")
    movies_path = tmpdir / "movies.dat"
    movies_path.write_text("\n".join(movie_rows) + "\n", encoding="latin-1")
    return ratings_path, movies_path


@pytest.fixture
def ml100k_like(tmp_path):
    from recmf.datasets import parse_ml100k

    data_path, item_path = synth_ml100k_files(tmp_path)
    return parse_ml100k(data_path, item_path)


@pytest.fixture
def ml1m_like(tmp_path):
    from recmf.datasets import parse_ml1m

    ratings_path, movies_path = synth_ml1m_files(tmp_path)
    return parse_ml1m(ratings_path, movies_path)


# ---------------------------------------------------------------------------
# planted low-rank data: ratings generated from a known factor model, so
# training tests can verify that the learners actually recover structure


def planted_dataset(
    n_users: int = 60,
    n_items: int = 50,
    rank: int = 3,
    density: float = 0.3,
    noise: float = 0.1,
    seed: int = 42,
) -> Dataset:
    rng = np.random.default_rng(seed)
    P = rng.normal(0, 1.0, (n_users, rank))
    Q = rng.normal(0, 1.0, (n_items, rank))
    full = 3.0 + P @ Q.T / np.sqrt(rank)
    mask = rng.random((n_users, n_items)) < density
    us, its = np.nonzero(mask)
    ratings = full[us, its] + rng.normal(0, noise, us.shape[0])
    ratings = np.clip(np.round(ratings), 1, 5)
    stamps = rng.integers(880_000_000, 890_000_000, us.shape[0])
    return Dataset(
        name="planted",
        users=us,
        items=its,
        ratings=ratings,
        timestamps=stamps,
        n_users=n_users,
        n_items=n_items,
    )


@pytest.fixture(scope="session")
def planted():
    return planted_dataset()

"""Shared corpus builders for the test suite."""

import numpy as np
import pytest

from macrid.corpus import InteractionMatrix, make_split


def make_random_corpus(seed=0, n_users=20, n_items=30, row_min=5, row_max=10):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_users):
        n = int(rng.integers(row_min, row_max + 1))
        rows.append(np.sort(rng.choice(n_items, size=n, replace=False)).astype(np.int32))
    return InteractionMatrix(
        n_users=n_users, n_items=n_items, rows=rows,
        user_vocab=[f"u{i}" for i in range(n_users)],
        item_vocab=[f"i{j}" for j in range(n_items)],
    )


def make_planted_corpus(seed=0, n_users=600, n_items=90, n_concepts=3,
                        adopt_lo=10, adopt_hi=20):
    """Items sit in disjoint concepts; each user adopts from exactly two."""
    rng = np.random.default_rng(seed)
    per = n_items // n_concepts
    labels = np.repeat(np.arange(n_concepts), per)
    rows = []
    for _ in range(n_users):
        picked = rng.choice(n_concepts, size=2, replace=False)
        total = int(rng.integers(adopt_lo, adopt_hi + 1))
        first = int(rng.integers(max(3, total - per), min(per, total - 3) + 1))
        counts = (first, total - first)
        row = np.concatenate([
            rng.choice(np.arange(k * per, (k + 1) * per), size=c, replace=False)
            for k, c in zip(picked, counts)
        ])
        rows.append(np.sort(row).astype(np.int32))
    corpus = InteractionMatrix(
        n_users=n_users, n_items=n_items, rows=rows,
        user_vocab=[f"u{i}" for i in range(n_users)],
        item_vocab=[f"i{j}" for j in range(n_items)],
    )
    corpus.validate()
    return corpus, labels


@pytest.fixture(scope="session")
def planted():
    corpus, labels = make_planted_corpus(seed=7)
    split = make_split(corpus, n_heldout=60, foldin_fraction=0.8, seed=7)
    return corpus, labels, split


@pytest.fixture(scope="session")
def small_corpus():
    corpus = make_random_corpus(seed=3)
    split = make_split(corpus, n_heldout=6, foldin_fraction=0.8, seed=3)
    return corpus, split

"""Derive independent generators from one root seed.

Streams are addressed by a tuple of integers (a counter path), so the same
stream is reproduced whether work runs sequentially or in parallel.
"""

from __future__ import annotations

import os

import numpy as np

SEED_ENV = "AUTOASM_SEED"


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def seed_from_env(seed: int | None) -> int | None:
    if seed is not None:
        return seed
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw not in (None, "") else None


# stream ids used across the package
POOL, PRETRAIN, TRAIN, INIT_POLICY, INIT_VALUE, SEARCH, BENCH, SUITE = range(8)

"""Deterministic RNG derivation.

Every stochastic draw in the engine comes from a generator derived here, so
runs are bit-reproducible given the master seed regardless of worker count
or execution order.  Query ids are folded in via SHA-256, never `hash()`,
which is salted per interpreter run.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Stream tags keep independent purposes from colliding on the same seed.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_SAMPLE = 3
STREAM_SYNTH_CORPUS = 4
STREAM_SYNTH_QUERIES = 5


def stable_key(text: str) -> int:
    """Map a string to a stable 64-bit integer."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Build a generator for (seed, *path); identical inputs give identical streams."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *[p & 0xFFFFFFFFFFFFFFFF for p in path]])


def query_rng(seed: int, epoch: int, query_id: str) -> np.random.Generator:
    """Per-(query, epoch) sampling stream, independent of iteration order."""
    return derive_rng(seed, STREAM_SAMPLE, epoch, stable_key(query_id))

"""Deterministic RNG substream derivation.

All randomness in the package flows from a single 64-bit master seed.
Independent substreams for chains, folds, stands, and replicates are derived
by hashing the stream labels into extra entropy words for a
``numpy.random.SeedSequence``:

    substream(seed, "cv", fold)          # one stream per CV fold
    substream(seed, "predict", stand_id) # one stream per stand

String labels are digested with SHA-256 (stable across processes and Python
versions, unlike the builtin ``hash``); integer labels are used directly.
The same (seed, labels...) tuple therefore always yields the same stream,
independent of execution order or worker scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _entropy_word(key: str | int) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *keys: str | int) -> np.random.SeedSequence:
    """SeedSequence for the substream identified by (seed, *keys)."""
    words = [_entropy_word(seed)] + [_entropy_word(k) for k in keys]
    return np.random.SeedSequence(words)


def substream(seed: int, *keys: str | int) -> np.random.Generator:
    """Generator for the substream identified by (seed, *keys)."""
    return np.random.default_rng(seed_sequence(seed, *keys))

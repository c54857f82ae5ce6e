"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by a master seed and a
path of integers, so ``stream(seed, 3, 7)`` is the same sequence on every
machine and independent of ``stream(seed, 3, 8)``.  String labels are hashed to
integers with CRC32 so call sites can use readable names.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream keys must be nonnegative, got {part}")
    return int(part)


def stream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream at ``path`` below ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def child(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Split ``count`` independent child generators off ``rng``."""
    return list(rng.spawn(count))

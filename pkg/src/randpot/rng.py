"""Deterministic random streams keyed by (master seed, purpose tag, index...).

Each stream is an independent Philox (counter-based) generator whose key is
derived from a :class:`numpy.random.SeedSequence` over the key tuple, so any
task can rebuild its stream without coordination between workers.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Generator for the task identified by ``(seed, tag, *index)``."""
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    words = [seed & 0xFFFFFFFF, seed >> 32, tag_id(tag)] + [int(i) for i in index]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: str, *index: int) -> int:
    """A 64-bit child seed for ``(seed, tag, *index)``."""
    return int(stream(seed, tag, *index).integers(0, 2 ** 63 - 1, dtype=np.int64))

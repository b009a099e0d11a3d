"""Seed splitting.

Every randomized stage draws from ``stream(seed, *keys)``. Keys are ints or
strings; strings are mapped to ints with CRC-32 so the derivation is stable
across processes and platforms. The child stream is
``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=keys)))``, so
adding a new stage never perturbs the draws of an existing one.
"""

from __future__ import annotations

import zlib
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _crc(part: str) -> int:
    return zlib.crc32(part.encode("utf-8"))


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return _crc(part)
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return int(part)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed derived the same way as :func:`stream`."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))

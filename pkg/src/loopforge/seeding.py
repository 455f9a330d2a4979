"""Deterministic RNG streams keyed by purpose.

Every random draw in the package goes through rng_for so that a run is a
pure function of its master seed.  Keys are free-form (strings, ints);
strings are hashed with crc32 so the stream layout never depends on
Python's per-process hash randomisation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_u32(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng key must be int or str, got {type(key).__name__}")


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for (seed, keys).

    Same arguments always give the same stream; distinct key tuples give
    statistically independent streams off the same master seed.
    """
    spawn = tuple(_key_to_u32(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn)
    return np.random.default_rng(ss)

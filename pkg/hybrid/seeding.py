# hybrid/seeding.py
# Derived RNG streams. Every random draw in the engine comes from a stream keyed by
# (seed, purpose, indices...), so results never depend on call order or thread count.

from __future__ import annotations
import zlib
import numpy as np

# Purpose tags are hashed with crc32; never use built-in hash(), it is salted per process.

def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8")) & 0xFFFFFFFF


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, indices) key."""
    key = [int(seed) & 0xFFFFFFFF, _tag(purpose)] + [int(i) & 0xFFFFFFFF for i in indices]
    return np.random.default_rng(np.random.SeedSequence(key))

"""Named random sub-streams derived from a single integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, name: str, *index: int) -> int:
    """Stable 63-bit seed for the sub-stream ``name`` (plus optional indices)."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(i) & 0xFFFFFFFF for i in index)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def generator(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name, *index))

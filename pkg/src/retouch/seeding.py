"""Derivation of independent sub-seeds from a master seed and a label."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """A 63-bit seed that depends only on ``master`` and the labels."""
    words = [int(master) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, (int, np.integer)):
            words.append(int(label) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(label).encode()))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))

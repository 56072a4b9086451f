"""Counter-based random substreams.

Every random draw in the package comes from a generator keyed by
``(master seed, purpose tag, index...)``. The key is fed to a
``SeedSequence`` driving a Philox generator, so the draws for a given key
do not depend on how work is split across workers or on the order in
which keys are requested.
"""
from __future__ import annotations

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Generator for the key ``(seed, tag, *index)``."""
    seed = int(seed) & SEED_MASK
    # split the 64-bit seed into two 32-bit words so SeedSequence sees all of it
    key = [seed & 0xFFFFFFFF, seed >> 32, tag_id(tag)]
    key.extend(int(i) for i in index)
    if any(k < 0 for k in key):
        raise ValueError("stream indices must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("an explicit seed or Generator is required")
    return substream(int(rng), "default")

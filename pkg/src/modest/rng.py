"""Named random sub-streams derived from one root seed."""

import numpy as np


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component `name` under root `seed`.

    The same (seed, name) always yields the same stream, and streams with
    different names do not share state.
    """
    key = fnv1a64(name.encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, key & 0xFFFFFFFF, key >> 32])

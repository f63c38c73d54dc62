"""Platform-stable seed derivation: ``splitmix64(master ^ fnv1a64(tag))``."""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream_tag: str) -> int:
    return splitmix64((int(master) & MASK64) ^ fnv1a64(stream_tag))


def rng_for(master: int, stream_tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stream_tag))

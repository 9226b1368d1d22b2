"""Seeded randomness.

All stochastic call sites take an explicit ``numpy.random.Generator`` backed
by Philox-4x64, a counter-based generator whose stream is fully determined by
the seed. Child streams are derived by key, not by draw order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Generator for ``seed`` and an optional path of sub-stream keys."""
    if not keys:
        return np.random.Generator(np.random.Philox(int(seed)))
    tag = "/".join(str(k) for k in keys).encode()
    digest = hashlib.sha256(tag).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), key]))

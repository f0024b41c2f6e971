"""Counter-based random streams keyed by (seed, stream name).

Philox is counter-based and splittable, so data generation, parameter
init, and shuffling draw from independent, individually reproducible
streams regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """A fresh generator for the given seed and stream name."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    key = np.array([seed & _MASK64, int.from_bytes(digest, "little")], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

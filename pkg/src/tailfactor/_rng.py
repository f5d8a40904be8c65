"""Counter-based random streams with stable derived keys.

Every source of randomness in the package is a Philox generator keyed by a
SHA-256 hash of (seed, stream labels), so each component is independently
reproducible bit-for-bit across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *parts) -> int:
    """128-bit Philox key derived from a seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:16], "big")


def stream(seed: int, *parts) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, parts)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *parts)))

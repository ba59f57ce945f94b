"""Deterministic RNG derivation.

Every random draw in the pipeline flows from a master seed. Independent
streams are derived from (seed, tag, ...) keys, so components consume
randomness without perturbing each other and the whole pipeline stays
bitwise-reproducible on a single thread.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_words(*parts) -> list[int]:
    """Hash arbitrary key parts into four 32-bit words (platform stable)."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stable_seed(*parts) -> int:
    """A single 63-bit seed derived from the key parts."""
    words = stable_words(*parts)
    return (words[0] | (words[1] << 32)) & (2**63 - 1)


def rng_for(*parts) -> np.random.Generator:
    """A fresh PCG64 generator keyed by the given parts."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stable_words(*parts))))

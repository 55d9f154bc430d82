"""Deterministic seed derivation.

Every random stream in the package is derived from an explicit integer seed
plus a tuple of labels, so that independent consumers never share state.
"""
import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def hash64(seed, *labels):
    """Stable 64-bit hash of ``seed`` and any number of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", int(seed) & MASK64))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return struct.unpack("<Q", h.digest())[0]


def derive_rng(seed, *labels):
    """Return a ``numpy.random.Generator`` for the derived stream."""
    if not labels:
        return np.random.default_rng(int(seed) & MASK64)
    return np.random.default_rng(hash64(seed, *labels))

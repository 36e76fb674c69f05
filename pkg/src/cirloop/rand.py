"""Deterministic seed derivation and counter-based random streams.

Every random choice in the engine draws from a Philox stream keyed by a
stable 64-bit hash of the relevant identifiers (run seed, triplet id,
round, ...). Results are therefore reproducible regardless of execution
order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def hash64(*parts: object) -> int:
    """Derive a stable unsigned 64-bit value from a tuple of parts.

    Each part is rendered to UTF-8 text and length-prefixed before hashing
    so that ("ab", "c") and ("a", "bc") cannot collide. Python's built-in
    ``hash`` is process-salted and unusable here.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        data = str(part).encode("utf-8")
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return int.from_bytes(h.digest(), "little")


def stream(*parts: object) -> np.random.Generator:
    """Return a fresh Philox generator keyed by ``hash64(*parts)``."""
    return np.random.Generator(np.random.Philox(key=hash64(*parts)))

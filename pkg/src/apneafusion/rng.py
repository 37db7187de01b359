"""Deterministic, order-independent random streams.

Every random draw in the pipeline is keyed on a tuple of (seed, purpose,
indices...) rather than on execution order, so parallel or reordered
processing reproduces identical bytes. Strings are hashed with blake2s, never
with Python's salted ``hash``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _to_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng key parts must be int or str, got {type(part)!r}")


def stable_seed(*parts) -> int:
    """Collapse key parts into one 64-bit seed, stably across runs."""
    h = hashlib.blake2s(digest_size=8)
    for part in parts:
        h.update(_to_int(part).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def make_rng(*parts) -> np.random.Generator:
    """Counter-based generator keyed on ``parts`` (order-independent use)."""
    return np.random.Generator(np.random.Philox(key=stable_seed(*parts)))

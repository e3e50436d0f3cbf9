"""Stable seed derivation shared across pipeline stages.

Python's builtin hash() is salted per process, so every derived seed goes
through keyed-less blake2b instead; results are identical across runs and
platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: int | str | bytes) -> int:
    """Map a tuple of ints/strings/bytes to a 64-bit unsigned seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; keep tag distinct
            data = b"b" + bytes([int(part)])
        elif isinstance(part, int):
            data = b"i" + part.to_bytes(16, "little", signed=True)
        elif isinstance(part, str):
            enc = part.encode("utf-8")
            data = b"s" + len(enc).to_bytes(4, "little") + enc
        elif isinstance(part, bytes):
            data = b"y" + len(part).to_bytes(4, "little") + part
        else:
            raise TypeError(f"unsupported seed part type: {type(part)!r}")
        h.update(data)
    return int.from_bytes(h.digest(), "little")


def rng_from(*parts: int | str | bytes) -> np.random.Generator:
    """Deterministic numpy Generator for the given seed parts."""
    return np.random.default_rng(stable_seed(*parts))

"""Deterministic RNG derivation so parallel workers need no shared state."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys) -> int:
    """Stable 64-bit seed from a root seed plus arbitrary subkeys."""
    h = hashlib.blake2s()
    for key in keys:
        h.update(_key_to_int(key).to_bytes(8, "little"))
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(*keys))))

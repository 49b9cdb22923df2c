"""Seed derivation. Every random stream comes from (global seed, purpose...) via a stable hash."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *purpose) -> int:
    key = repr((int(seed),) + tuple(str(p) for p in purpose)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_rng(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))

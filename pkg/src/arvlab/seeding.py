"""Stable seed derivation: independent streams per (master seed, name)."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *names) -> int:
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "big")


def rng_for(master_seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *names))

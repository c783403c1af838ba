"""Deterministic seed fan-out: one master seed derives named sub-seeds."""

import hashlib

import numpy as np


def sub_seed(master_seed: int, name: str) -> int:
    """Derive a stable 63-bit sub-seed for a named component.

    Uses SHA-256 so the mapping is identical across processes and platforms
    (Python's builtin hash() is salted per process).
    """
    digest = hashlib.sha256(f"{master_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master_seed: int, name: str) -> np.random.Generator:
    """A fresh PCG64 generator for the named component of a run."""
    return np.random.Generator(np.random.PCG64(sub_seed(master_seed, name)))

"""Seeded random source.

Backed by numpy's PCG64 bit generator. Normal draws use numpy's ziggurat
transform, uniforms the standard 53-bit float construction; both are pure
functions of the seed, so identical seeds give identical streams.
"""

from __future__ import annotations

import numpy as np


def seeded_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Deterministic child seed for a (seed, keys...) tuple."""
    material = [int(seed)] + [k if isinstance(k, int) else _str_key(k) for k in keys]
    return int(np.random.SeedSequence(material).generate_state(1, dtype=np.uint64)[0])


def _str_key(s: str) -> int:
    return int.from_bytes(s.encode("utf-8")[:16].ljust(16, b"\0"), "little")

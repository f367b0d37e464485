"""Seeded random streams.

All randomness derives from one root seed; named sub-streams (``"data"``,
``"model"``, ``"sampling"``...) are independent of each other and of the
order in which they are created.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``; identical across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def derive_seed(seed: int, *labels: int | str) -> int:
    """Deterministic 32-bit child seed, e.g. one per dataset index."""
    parts = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        parts.append(zlib.crc32(lab.encode("utf-8")) if isinstance(lab, str) else int(lab))
    return int(np.random.SeedSequence(parts).generate_state(1)[0])

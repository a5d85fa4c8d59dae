"""Deterministic RNG streams keyed by (seed, purpose tags).

Every stochastic component draws from its own stream so that, e.g., enhancer
pre-training can never perturb episode sampling for a fixed seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    parts = [int(seed)]
    for tag in tags:
        parts.append(zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag))
    return np.random.default_rng(np.random.SeedSequence(parts))

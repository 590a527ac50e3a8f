"""Deterministic, splittable random streams.

Every random decision in the package flows from a 64-bit master seed through
Philox counter-based generators. Sub-streams are derived from integer stream
keys (epoch, batch index, sample index, ...) so any stage can be reproduced
in isolation on any platform.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for the (seed, *stream) key; identical keys give identical streams."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *stream: int) -> int:
    """Collapse a (seed, *stream) key into one 64-bit integer seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(1, np.uint64)[0])

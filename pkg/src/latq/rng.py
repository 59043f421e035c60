"""Seeded random number generation.

Every stochastic site in the package draws from a Philox counter-based
generator so that a (seed, call sequence) pair fully determines the run,
serial or parallel.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; same seed + same call sequence -> same draws."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child streams derived deterministically from one seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(ss)) for ss in children]

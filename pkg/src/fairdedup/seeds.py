"""Seed derivation.

Every random draw in the engine flows from one root seed through named
sub-streams, so components are individually reproducible and independent
of each other's consumption order.
"""

from __future__ import annotations

import numpy as np

# Stream tags; fixed small integers keep sub-streams disjoint.
STREAM_CLUSTER = 1
STREAM_DEDUP = 2
STREAM_SYNTH = 3
STREAM_TRIAL = 4
STREAM_CENTER = 5


def spawn(seed: int, *path: int) -> np.random.SeedSequence:
    """Child seed sequence for the sub-stream of ``seed`` named by ``path``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))


def generator(seed: int, *path: int) -> np.random.Generator:
    """Generator on the sub-stream of ``seed`` named by ``path``."""
    return np.random.Generator(np.random.PCG64(spawn(seed, *path)))

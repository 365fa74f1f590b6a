"""Deterministic seed derivation.

Every random draw in the package flows from a single master seed through
`derive_seed`, a splitmix64 chain: each path component advances the state by
the 64-bit golden ratio and mixes in the component. Children of distinct
paths are statistically independent, and the mapping is pure arithmetic, so
runs are reproducible across platforms and processes.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *path: int) -> int:
    """Map a master seed plus integer path components to a 64-bit child seed."""
    state = master & _MASK
    for part in path:
        state = (state + _GAMMA) & _MASK
        state = _mix(state ^ (int(part) & _MASK))
    return _mix(state + _GAMMA)


def rng_from(seed: int) -> np.random.Generator:
    """PCG64 generator for a (derived) integer seed."""
    return np.random.Generator(np.random.PCG64(seed & _MASK))


# Stream tags keep unrelated consumers of the same master seed independent.
STREAM_SEQUENCE = 1
STREAM_DROP = 2
STREAM_MODEL_INIT = 3
STREAM_EPOCH = 4
STREAM_PAIRS = 5

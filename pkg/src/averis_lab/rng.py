"""Seeded generator family shared by every module.

All randomness flows through :func:`make_rng`, which keys a PCG64 stream on a
root seed plus an arbitrary tuple of stream indices. Two calls with the same
key always produce the same stream, and different keys are independent.
"""

from __future__ import annotations

import os

import numpy as np

DEFAULT_SEED = 0
SEED_ENV_VAR = "AVERIS_SEED"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) & 0xFFFFFFFFFFFFFFFF for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def resolve_seed(seed: int | None) -> int:
    """Explicit seed wins, then the AVERIS_SEED environment variable, then 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None and env.strip():
        return int(env)
    return DEFAULT_SEED

"""Hierarchical random substreams derived from one master seed.

Every stochastic component pulls its own generator keyed by a path like
``("sense", vehicle_id, tick)``.  Substreams are statistically independent
and reproducible regardless of evaluation order, which is what makes
paired estimator stacks and worker pools bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"substream key parts must be non-negative, got {part}")
    return int(part) & 0xFFFFFFFF


def substream(master_seed: int, *key: int | str) -> np.random.Generator:
    """Generator for the substream addressed by ``key`` under ``master_seed``."""
    spawn_key = tuple(_key_part(p) for p in key)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=spawn_key))

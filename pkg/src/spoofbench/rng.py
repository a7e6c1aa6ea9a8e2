"""Named random sub-streams derived from a single integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)])

"""Seed plumbing: one 64-bit seed, split per consumer.

Every random draw flows from a single root seed through counter-based
Philox streams keyed by a spawn path, so per-layer and per-weight draws do
not depend on the order in which other components consume randomness.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream"]


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for (seed, path); stable across call order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))

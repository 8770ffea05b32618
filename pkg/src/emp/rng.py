"""Seedable, splittable random streams.

All randomness in the project flows through Philox (counter-based)
generators keyed by an integer seed plus a spawn path, so any component
can derive an independent stream without coordinating with the others
and every run is exactly reproducible from its seed.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the Philox generator for (seed, path)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))

"""Deterministic random-number streams for nested simulation tasks.

Every stochastic component (trial replication, imputation, bootstrap
replicate) draws from a substream addressed by an integer path under a
single root seed.  Philox is counter-based, so substreams with distinct
paths are statistically independent and their values do not depend on the
order in which sibling substreams are consumed -- results are identical
for any parallel schedule.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream addressed by `path` under `seed`."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Collapse (seed, path) into a plain integer seed for a sub-component.

    Used when a nested component exposes an integer-seed API of its own.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(path))
    return int(ss.generate_state(1, np.uint64)[0])

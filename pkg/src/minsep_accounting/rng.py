"""Seeded substreams.

Every random draw in the package comes from a Philox generator keyed by a
``SeedSequence(seed, spawn_key=path)``. The same ``(seed, path)`` always
yields the same stream, no matter which thread or in what order it is built,
which is what makes schedules and Monte Carlo estimates independent of worker
count.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# stream namespaces; keep stable, they are part of the reproducibility contract
EXAMPLE = 1
MC_BLOCK = 2
RUNG = 3
CELL = 4
GRAPH = 5
SEARCH = 6


def normalize_seed(seed) -> int:
    if seed is None:
        raise ValueError("an explicit seed is required")
    return int(seed) & MASK64


def substream(seed, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(normalize_seed(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *path) -> int:
    """A 64-bit child seed, for handing to another component."""
    ss = np.random.SeedSequence(normalize_seed(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])

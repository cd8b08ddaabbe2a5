"""Named random streams on a counter-based generator.

Every random draw in the package comes from ``stream(seed, name, *counters)``:
a Philox generator keyed by the run seed, a fixed stream id, and integer
counters (epoch, restart, sample index, ...). Streams never share state, so
sharding work across processes cannot change what any sample sees.

Stream ids are part of the reproducibility contract; do not renumber.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 1,
    "shuffle": 2,
    "attack-restart": 3,
    "synthetic-data": 4,
    "subset": 5,
}


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], *map(int, counters)))
    return np.random.Generator(np.random.Philox(ss))

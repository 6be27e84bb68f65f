"""
Seed derivation for reproducible runs.

All randomness flows from one master seed. Children are keyed by a path of
non-negative integers (command -> shard -> chain -> replication), so the seed of
a unit of work never depends on how many siblings ran before it.
"""
from __future__ import annotations

from typing import List

import numpy as np

# Path prefixes keep the derived streams of different levels apart
SHARD = 1
CHAIN = 2
REPLICATION = 3
GENERATOR = 4


def derive_seed(master: int, *path: int) -> int:
    """Return a 32-bit seed derived from `master` and an integer path."""
    if not path:
        return int(master)
    seq = np.random.SeedSequence([int(master), *[int(p) for p in path]])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def chain_seeds(seed: int, n_chains: int) -> List[int]:
    return [derive_seed(seed, CHAIN, c) for c in range(n_chains)]


def shard_seeds(master: int, n_shards: int) -> List[int]:
    # shard 0 inherits the master seed so an unsharded run equals a direct fit
    return [int(master)] + [derive_seed(master, SHARD, m) for m in range(1, n_shards)]


def replication_seeds(master: int, n_replications: int) -> List[int]:
    return [derive_seed(master, REPLICATION, r) for r in range(n_replications)]

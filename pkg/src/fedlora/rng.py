"""Deterministic random streams, split by purpose.

Every consumer of randomness gets its own generator derived from the
experiment seed plus an integer key (domain, then round / client / layer
indices as needed). Streams are independent of scheduling order: client 7's
round-3 training stream is the same whether clients run serially or in a
thread pool, and resuming from a checkpoint at round R reproduces rounds
R.. exactly because the key encodes the round index.
"""

from __future__ import annotations

import numpy as np

DOMAIN_TASK = 0  # dataset and teacher generation
DOMAIN_PARTITION = 1  # dirichlet assignment and test splits
DOMAIN_INIT = 2  # adapter initialization, keyed by layer
DOMAIN_TRAIN = 3  # batch shuffling, keyed by (round, client)
DOMAIN_REINIT = 4  # post-round adapter re-init (ideal, stack), keyed by (round, layer)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for (seed, key); same arguments, same bit stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)

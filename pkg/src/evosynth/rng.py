"""Deterministic random streams.

Every independent stream is identified by a root seed plus a tuple of
non-negative integers (the stream key). The key becomes the ``spawn_key``
of a numpy ``SeedSequence`` and the stream itself is a Philox counter-based
generator, so distinct keys yield non-overlapping streams that can be drawn
from in any order (or in parallel) without affecting one another.

Fixed role tags keep the keyspace from colliding across subsystems:
``(generation, ROLE, ...)`` for the evolution driver,
``(attempt, layer, kernel)`` inside offspring sampling.
"""

from __future__ import annotations

import numpy as np

# role tags used as stream-key components by the evolution driver
ROLE_INIT = 0
ROLE_TRAIN = 1
ROLE_SYNTH = 2
ROLE_DATA = 3


def seed_sequence(root: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))


def stream(root: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the stream named by `key`."""
    return np.random.Generator(np.random.Philox(seed_sequence(root, *key)))


def derive_seed(root: int, *key: int) -> int:
    """Collapse a stream key to a plain 64-bit seed for APIs that take one."""
    return int(seed_sequence(root, *key).generate_state(1, np.uint64)[0])

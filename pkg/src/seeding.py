"""Deterministic seed derivation.

Every random stream in a run is keyed by a tuple of non-negative integers
(master seed, stream tag, round, client, ...) and expanded through
``numpy.random.SeedSequence``, so any stream can be reproduced in isolation.
"""

from typing import Tuple

import numpy as np

# Stream tags
DATA = 1
INIT = 2
SAMPLING = 3
EPOCHS = 4
CLIENT_STATE = 5
REPEAT = 6


def _entropy(keys: Tuple[int, ...]) -> Tuple[int, ...]:
    for key in keys:
        if int(key) < 0:
            raise ValueError(f"Seed keys must be non-negative, got {key}")
    return tuple(int(key) for key in keys)


def derive_seed(*keys: int) -> int:
    """Mix integer keys into a single 32-bit seed."""
    sequence = np.random.SeedSequence(_entropy(keys))
    return int(sequence.generate_state(1)[0])


def derive_rng(*keys: int) -> np.random.Generator:
    """Return a generator seeded from the mixed keys."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(keys)))

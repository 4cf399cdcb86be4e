"""Named random sub-streams derived from one user-facing seed.

Every consumer of randomness (weight init, data synthesis, batch order)
pulls its own generator by name, so adding or removing one consumer never
shifts the draws seen by another.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))

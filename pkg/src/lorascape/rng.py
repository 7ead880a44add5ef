"""Project-wide pseudorandom generator policy.

All randomness flows through numpy's PCG64 bit generator seeded via
SeedSequence, so every artifact is a pure function of the integers that
name it.  Sub-streams are derived by spawning from a key tuple rather
than by arithmetic on seeds, which keeps streams independent.
"""

from __future__ import annotations

import numpy as np

GENERATOR_ID = "numpy-pcg64"


def make_rng(*key: int) -> np.random.Generator:
    """Generator for the stream named by an integer key tuple."""
    if not key:
        raise ValueError("at least one seed integer is required")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))

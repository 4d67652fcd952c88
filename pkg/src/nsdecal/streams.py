"""Named, counter-keyed random streams derived from one root seed.

A stream is identified by (seed, purpose, stage, epoch); the same key always
yields the same generator, regardless of what other streams were consumed.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "data": 0,        # synthetic market data
    "init": 1,        # network initialisation (theta)
    "paths": 2,       # Brownian increments for simulation
    "sgld": 3,        # Langevin noise
    "hedge-init": 4,  # hedge network initialisation (xi)
    "pricing": 6,     # posterior exotic pricing
}


def stream(seed: int, purpose: str, stage: int = 0, epoch: int = 0) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    if seed < 0 or stage < 0 or epoch < 0:
        raise ValueError("seed, stage and epoch must be non-negative")
    ss = np.random.SeedSequence([int(seed), PURPOSES[purpose], int(stage), int(epoch)])
    return np.random.Generator(np.random.PCG64(ss))

"""Reproducible random streams.

Every stream is a numpy ``Generator`` over the counter-based Philox4x64
bit generator.  Streams are addressed by ``(master_seed, purpose, *ids)``
through ``SeedSequence`` spawn keys, so a trial's draws never depend on
how many other trials ran before it or on which worker ran it.
"""
from __future__ import annotations

import numpy as np

# Fixed purpose codes; changing one changes every derived stream.
PURPOSES = {
    "family": 1,
    "train": 2,
    "heldout": 3,
    "noise": 4,
    "attack": 5,
    "attack_noise": 6,
    "bootstrap": 7,
    "truth": 8,
}


def stream(master_seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Return the Philox generator for ``(master_seed, purpose, *ids)``."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    key = (PURPOSES[purpose],) + tuple(int(i) for i in ids)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))

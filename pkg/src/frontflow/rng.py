"""Named, counter-based random substreams.

Every stochastic component draws from its own Philox stream derived from
(master seed, component name), so changing the resolution or draw count of
one component never perturbs any other.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2s(name.encode(), digest_size=4).digest(), "little")


def substream(seed: int, *names: str) -> np.random.Generator:
    """Generator for the substream identified by ``names`` under ``seed``."""
    key = tuple(_name_key(n) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))

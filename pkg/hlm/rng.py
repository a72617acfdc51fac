"""Named, splittable random streams on top of numpy's counter-based Philox.

Every stochastic site draws from its own stream, keyed by the run seed, a
stream name and an optional integer index (step, batch, epoch). Streams do
not share state, so adding a draw in one place never shifts another.
"""

import hashlib

import numpy as np


def derive_key(seed: int, name: str, *index: int) -> int:
    material = ":".join([str(seed), name, *map(str, index)]).encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "little")


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, name, *index)))


def derive_seed(seed: int, name: str, *index: int) -> int:
    """A 63-bit child seed, for APIs that take a plain integer seed."""
    return derive_key(seed, name, *index) >> 65

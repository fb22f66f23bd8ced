"""Counter-based splittable random streams.

Every stochastic consumer in the package derives its stream from a 64-bit
master seed plus a component name and integer indices. The key is hashed into
a Philox counter-based generator, so streams are pure functions of their key:
repeated construction yields bitwise-identical draws, adding a new component
never perturbs existing streams, and distinct keys give statistically
independent streams regardless of scheduling or thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_key(component: str, *indices: int) -> int:
    """Hash a component name and indices into a stable 64-bit word."""
    h = hashlib.blake2b(digest_size=8)
    h.update(component.encode("utf-8"))
    for i in indices:
        h.update(int(i).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, component: str, *indices: int) -> int:
    """Fold a component key into a master seed, giving a new 64-bit seed."""
    return (int(seed) ^ derive_key(component, *indices)) & _MASK64


def stream(seed: int, component: str, *indices: int) -> np.random.Generator:
    """A fresh generator for (seed, component, indices); pure by construction."""
    key = (int(seed) & _MASK64, derive_key(component, *indices))
    return np.random.Generator(np.random.Philox(key=key))


def normal(seed: int, component: str, *indices: int, shape: tuple) -> np.ndarray:
    """Standard-normal draws for the keyed stream (draw order = draw index)."""
    return stream(seed, component, *indices).standard_normal(shape, dtype=np.float64)

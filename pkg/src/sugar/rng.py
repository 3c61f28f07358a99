"""Seeded random number generation with stable child-stream derivation.

Every stochastic component in the package draws from an `Rng`. Identical
seeds give identical draw sequences across runs, and child streams derived
with the same keys are independent of the order in which sibling streams
are consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    """Map a child-stream key to a stable 64-bit integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic generator (PCG64) keyed by a 64-bit seed."""

    def __init__(self, seed: int, _entropy: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self._entropy = (self.seed,) + tuple(_entropy)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def child(self, *keys: int | str) -> "Rng":
        """Independent stream derived from this seed and the given keys."""
        extra = tuple(_key_to_int(k) for k in keys)
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng._entropy = self._entropy + extra
        rng._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng._entropy)))
        return rng

    # -- draws ---------------------------------------------------------------

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray | float:
        out = self._gen.standard_normal(shape) * scale
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, seq):
        """Uniform element from a non-empty sequence."""
        if len(seq) == 0:
            raise ValueError("choice from empty sequence")
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

"""Deterministic, labelled random number streams.

Every source of randomness in the package (parameter init, dropout masks,
data generation, shuffling) draws from an :class:`RngStream` identified by a
(seed, label) pair.  Streams are backed by the counter-based Philox generator,
so identical (seed, label) pairs produce bitwise-identical sequences on every
platform and run, independently of any other stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64"


class RngStream:
    """A named, reproducible random stream.

    The Philox key is derived from sha256(seed, label), so streams with
    different labels are statistically independent even under the same seed.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(f"{self.seed}\x1f{self.label}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")  # Philox takes a 128-bit key
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "RngStream":
        """Derive an independent sub-stream, e.g. per sample or per epoch."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def normal(self, shape=(), mean=0.0, std=1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream({ALGORITHM}, seed={self.seed}, label={self.label!r})"

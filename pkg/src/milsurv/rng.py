"""Deterministic random number streams.

A counter-based Philox generator keyed by (seed, stream) so that every
component of a run (init, shuffling, dropout, data synthesis) can own an
independent stream that replays identically across runs and platforms.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Philox-backed generator addressed by a 64-bit (seed, stream) pair.

    Identical (seed, stream) always yields the identical value sequence.
    Derive independent streams with :meth:`stream` instead of sharing one
    generator across concurrent units.
    """

    algorithm = "philox"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def stream(self, stream_id: int) -> "Rng":
        """A fresh, independent generator on the same seed."""
        return Rng(self.seed, stream_id)

    # -- draws ----------------------------------------------------------

    def random(self, shape=None, dtype=np.float64):
        return self._gen.random(size=shape, dtype=dtype)

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None):
        return self._gen.normal(loc, scale, size=shape)

    def exponential(self, scale: float = 1.0, shape=None):
        return self._gen.exponential(scale, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)

    def __repr__(self) -> str:
        return f"Rng(algorithm={self.algorithm!r}, seed={self.seed}, stream={self.stream_id})"

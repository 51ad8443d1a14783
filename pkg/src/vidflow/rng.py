"""Deterministic random numbers from a counter-based generator.

Every stochastic routine in the package takes an explicit `Rng` handle.
Streams are derived by name, so independent components (data loading,
noise draws, init) never share or race a generator, and any run is
replayable from (seed, stream path) alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Philox(counter-based) generator addressed by seed + stream path."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.sha256(repr((self.seed,) + self.path).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def stream(self, *names) -> "Rng":
        """Derive an independent child generator for the given name path."""
        return Rng(self.seed, self.path + tuple(names))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options, size=None, replace: bool = True):
        return self._gen.choice(options, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(map(str, self.path))!r})"

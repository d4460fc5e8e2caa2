"""Deterministic named random streams.

Every stochastic operation in this package draws from an :class:`RngStream`
identified by ``(seed, purpose)``.  Draw number ``i`` of a stream is produced
by a Philox4x64-10 counter-based generator whose 128-bit key is the first 16
bytes (interpreted little-endian) of ``SHA-256("{seed}/{purpose}")`` and whose
256-bit start counter is ``(0, 0, 0, i)``.  Consecutive draws therefore use
disjoint counter blocks, and identical ``(seed, purpose, counter)`` triples
yield identical values on every platform numpy supports.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


class RngStream:
    """A named, counter-addressed source of reproducible randomness."""

    def __init__(self, seed: int, purpose: str):
        self.seed = int(seed)
        self.purpose = str(purpose)
        self.counter = 0
        digest = hashlib.sha256(f"{self.seed}/{self.purpose}".encode()).digest()
        self._key = np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, purpose={self.purpose!r}, counter={self.counter})"

    def _generator(self) -> np.random.Generator:
        ctr = np.zeros(4, dtype=np.uint64)
        ctr[3] = self.counter  # draws are 2**192 blocks apart: no overlap
        self.counter += 1
        return np.random.Generator(np.random.Philox(counter=ctr, key=self._key))

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(loc, scale, size)

    def uniform(self, size=None) -> np.ndarray:
        return self._generator().uniform(0.0, 1.0, size)

    def bernoulli(self, p: float) -> bool:
        return bool(self._generator().uniform() < p)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator().integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)

"""Seeded, splittable random streams.

Every stream is a Philox counter-based generator keyed by ``(seed, *path)``,
so a child stream such as ``Rng(seed).child("augment", epoch, index)`` can be
re-derived anywhere without replaying a parent stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"rng key parts must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


class Rng:
    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path) -> "Rng":
        return Rng(self.seed, self.path + tuple(path))

    def normal(self, size, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def trunc_normal(self, size, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) samples redrawn until they lie within ``bound * std``."""
        out = self._gen.standard_normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

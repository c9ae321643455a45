"""Seeded, splittable random streams.

Backed by numpy's Philox counter-based bit generator, keyed through
``SeedSequence`` so child streams derived by name are independent of the
order in which they are requested.
"""
import zlib

import numpy as np

ALGORITHM = "philox4x64-seedseq"


class RngState:
    """A reproducible random stream identified by ``(seed, path)``."""

    algorithm = ALGORITHM

    def __init__(self, seed=0, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, key):
        """Independent stream for ``key`` (an int or a string label)."""
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return RngState(self.seed, self._path + (int(key),))

    def split(self, n):
        return [self.child(i) for i in range(n)]

    def normal(self, shape, std=1.0, dtype=np.float32):
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def trunc_normal(self, shape, std=1.0, bound=2.0, dtype=np.float32):
        """Normal(0, std) truncated to ``[-bound*std, bound*std]`` by resampling."""
        z = self._gen.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (z * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32):
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngState(seed={self.seed}, path={self._path})"

"""Named random streams split from one master seed.

A stream is identified by ``(master seed, seed index, label)``; the
label is hashed with CRC32 into the spawn key of a
:class:`numpy.random.SeedSequence`, so streams for different roles never
overlap and ablations that share a seed share their random numbers.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["STREAM_LABELS", "Streams"]

STREAM_LABELS = ("train", "init", "pin", "inner", "obs", "tfg", "recon", "oracle", "eval")


class Streams:
    def __init__(self, master_seed: int, index: int = 0):
        self.master_seed = int(master_seed)
        self.index = int(index)
        self._cache: dict[str, np.random.Generator] = {}

    def key(self, label: str) -> tuple[int, int]:
        return (self.index, zlib.crc32(label.encode()))

    def __call__(self, label: str) -> np.random.Generator:
        gen = self._cache.get(label)
        if gen is None:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=self.key(label))
            gen = self._cache[label] = np.random.Generator(np.random.PCG64(seq))
        return gen

    def fresh(self, label: str) -> np.random.Generator:
        """A new generator at the start of ``label``'s stream."""
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.key(label))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, index: int) -> "Streams":
        return Streams(self.master_seed, index)

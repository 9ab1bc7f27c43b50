"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed through numpy's
``SeedSequence``. Both algorithms are fixed and platform independent, so a
seed reproduces the same draws everywhere. Only ``random()`` (uniform doubles)
and ``permutation``/``integers`` are used, whose output for a given bit stream
is stable across numpy releases.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


class Rng:
    """A single-owner random stream; not safe to share between threads."""

    def __init__(self, seed: int, *path: str | int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed, *(_tag_key(p) for p in path)]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *tag: str | int) -> "Rng":
        """Independent stream derived from this stream's seed and a tag.

        Derivation depends only on (seed, path, tag), never on how many draws
        the parent has made.
        """
        return Rng(self.seed, *self.path, *tag)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def uniform_range(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def poisson(self, lam: float, size=None):
        return self._gen.poisson(lam, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"

"""Deterministic counter-based random streams for parallel Monte Carlo."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Mix a base seed with work-item indices into a fresh 64-bit value."""
    h = _splitmix64(seed & _MASK64)
    for ix in indices:
        h = _splitmix64(h ^ (int(ix) & _MASK64))
    return h


@dataclass(frozen=True)
class Rng:
    """A (seed, stream) pair backed by the counter-based Philox generator.

    Identical (seed, stream) values yield identical sequences on any machine
    and under any worker count. Streams are cheap to derive, so every
    parallel work item gets its own; streams are never shared.
    """

    seed: int
    stream: int = 0
    algorithm: str = "philox4x64"

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *indices: int) -> "Rng":
        """A derived stream for the given work-item indices."""
        return Rng(self.seed, derive_seed(self.stream, *indices), self.algorithm)

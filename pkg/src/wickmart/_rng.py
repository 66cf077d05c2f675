"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, domain, index)`` so a
path (or replica) can be regenerated on its own, and batches give the same
numbers regardless of how they are split across workers.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream domains keep subsystems sharing a seed from sharing numbers
PATHS = 1
COUPLING = 2
FIELD = 3
ESTIMATORS = 4
LINE = 5


def stream(seed: int, index: int, domain: int = 0) -> np.random.Generator:
    if index < 0 or index >= 1 << 48:
        raise ValueError(f"stream index out of range: {index}")
    key = (int(seed) & _MASK64) | (((domain & 0xFFFF) << 48 | index) << 64)
    return np.random.Generator(np.random.Philox(key=key))


class StreamBlock:
    """Consecutive streams ``first .. first + count - 1`` advanced in lockstep."""

    def __init__(self, seed: int, domain: int, first: int, count: int):
        self.first = first
        self.count = count
        self._gens = [stream(seed, first + j, domain) for j in range(count)]

    def normals(self, size: int, subset=None) -> np.ndarray:
        """Next ``size`` normals of every stream (or of ``subset``), shape ``(size, k)``."""
        gens = self._gens if subset is None else [self._gens[j] for j in subset]
        buf = np.empty((len(gens), size))
        for row, g in zip(buf, gens):
            g.standard_normal(out=row)
        return np.ascontiguousarray(buf.T)

    def uniforms(self, size: int, subset=None) -> np.ndarray:
        gens = self._gens if subset is None else [self._gens[j] for j in subset]
        buf = np.empty((len(gens), size))
        for row, g in zip(buf, gens):
            g.random(out=row)
        return np.ascontiguousarray(buf.T)

    def generator(self, j: int) -> np.random.Generator:
        return self._gens[j]


def blocks(n: int, block_size: int):
    """Yield ``(first, count)`` pairs tiling ``range(n)``."""
    for first in range(0, n, block_size):
        yield first, min(block_size, n - first)

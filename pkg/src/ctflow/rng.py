"""Counter-based random streams.

A stream is addressed by ``(seed, stream_id)`` — the 128-bit Philox key — and
a draw counter.  Every output is a pure function of that triple, so results
never depend on call order across streams, thread schedules, or process
boundaries.  Distinct stream ids are independent by the Philox construction.

Counter accounting (documented contract): ``uniforms(n)`` and ``normals(n)``
both consume exactly ``n`` counter positions, and the draw at position ``c``
does not depend on how calls were batched (normals use the inverse normal
CDF, one uniform each).

Within a particle cloud, particle ``i`` of a step draw owns the contiguous
counter lane ``[base + i*d, base + (i+1)*d)``, which is what makes per-step
particle updates embarrassingly parallel without changing any value.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

__all__ = ["RandomStream", "mix64"]

_MASK = (1 << 64) - 1


def mix64(*values: int) -> int:
    """splitmix64-style avalanche over a tuple of ints, to derive stream ids."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (int(v) & _MASK)) * 0xBF58476D1CE4E5B9 & _MASK
        h = (h ^ (h >> 27)) * 0x94D049BB133111EB & _MASK
        h ^= h >> 31
    return h


class RandomStream:
    """One independently addressable Philox lane with explicit counters."""

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.stream_id = int(stream_id) & _MASK
        self.counter = int(counter)

    def __repr__(self):
        return (f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, "
                f"counter={self.counter})")

    def child(self, index: int) -> "RandomStream":
        """A fresh independent stream derived from this one's identity."""
        return RandomStream(self.seed, mix64(self.stream_id, index), 0)

    def _raw(self, n: int) -> np.ndarray:
        bg = Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        blocks, rem = divmod(self.counter, 4)  # Philox emits 4 words per counter block
        if blocks:
            bg.advance(blocks)
        if rem:
            bg.random_raw(rem)
        out = bg.random_raw(n) if n else np.empty(0, dtype=np.uint64)
        self.counter += n
        return out

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles strictly inside (0, 1); consumes n counter positions."""
        if n < 0:
            raise ValueError("n must be >= 0")
        bits = self._raw(int(n))
        return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal draws; consumes exactly n positions."""
        return ndtri(self.uniforms(n))

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.normals(rows * cols).reshape(rows, cols)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers in [0, high) via uniform inversion; consumes n positions."""
        return np.minimum((self.uniforms(n) * high).astype(np.int64), high - 1)

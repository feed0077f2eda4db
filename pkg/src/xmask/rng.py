"""Seeded, platform-independent random number generation.

The generator is SplitMix64.  Output ``i`` (counting from 0) of a stream
with seed ``s`` and counter ``c`` is::

    z  = s + GAMMA * (c + i + 1)            (mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z  =  z ^ (z >> 31)

with ``GAMMA = 0x9E3779B97F4A7C15``.  A uniform double in [0, 1) is
``(z >> 11) * 2**-53``.  Normals use Box-Muller on consecutive uniform pairs
``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.

Because every output is a pure function of ``(seed, index)`` the whole stream
can be generated vectorised with wrapping uint64 arithmetic, and the values
are identical on every platform.  Values fill tensors in row-major order.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Raw 64-bit outputs ``offset .. offset+count-1`` of the stream for ``seed``."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + GAMMA * idx
        return _mix(z)


class Rng:
    """Counter-based SplitMix64 stream.

    >>> Rng(42).uniform((2, 3)).shape
    (2, 3)
    """

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed}")
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def _next(self, count: int) -> np.ndarray:
        out = splitmix64(self.seed, count, self.counter)
        self.counter += count
        return out

    def next_u64(self) -> int:
        return int(self._next(1)[0])

    def uniform(self, shape=()) -> np.ndarray:
        """Float64 samples in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        bits = self._next(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((n, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        z = r * np.cos(2.0 * np.pi * u[:, 1])
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, e.g. one per sample index."""
        with np.errstate(over="ignore"):
            child = _mix(np.uint64(self.seed) ^ (GAMMA * np.uint64(key + 1)))
        return Rng(int(child))

"""Seeded xoshiro256** generator; the only source of randomness in the package.

Algorithm (64-bit unsigned arithmetic, ``rotl`` = rotate left)::

    result = rotl(s1 * 5, 7) * 9
    t = s1 << 17
    s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)

The four state words are filled by splitmix64 (increment 0x9E3779B97F4A7C15,
multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, shifts 30/27/31)
starting from ``seed + stream * 0xD1B54A32D192ED03``.  Derived variates:

* uniform double: ``(u >> 11) * 2**-53``
* normal: Box-Muller on pairs ``(u1, u2)``, ``sqrt(-2 ln(1 - u1))`` times
  ``cos(2 pi u2)`` then ``sin(2 pi u2)``
* permutation of n: Fisher-Yates from the top, ``j = floor(u * (i + 1))``
"""

from __future__ import annotations

import numpy as np

from . import _kernels

_MASK64 = (1 << 64) - 1
_STREAM_STEP = 0xD1B54A32D192ED03

# named sub-streams, so changing one consumer never shifts another's draws
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_SPLIT = 3
STREAM_SHUFFLE = 4


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        x = (seed + stream * _STREAM_STEP) & _MASK64
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    @classmethod
    def from_state(cls, state) -> "Rng":
        obj = cls.__new__(cls)
        obj.state = np.array(state, dtype=np.uint64)
        return obj

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _kernels.xoshiro_fill(self.state, out)
        return out

    def random(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        size = int(np.prod(shape))
        return (low + (high - low) * self.random(size)).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        size = int(np.prod(shape))
        pairs = (size + 1) // 2
        u = self.random(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        ang = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(ang)
        z[1::2] = r * np.sin(ang)
        return z[:size].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        if n <= 1:
            return np.arange(n, dtype=np.int64)
        return np.asarray(_kernels.fisher_yates(self.random(n - 1)), dtype=np.int64)

"""Portable pseudo-random streams.

Both generators are defined bit-for-bit so that scenes and masks can be
reproduced by any implementation: splitmix64 for seeding and index draws,
xorshift64* for bulk sampling.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_XS_MULT = 0x2545F4914F6CDD1D
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64 stream; ``next()`` advances by the golden gamma then mixes."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def bounded(self, n: int) -> int:
        """Integer in [0, n) by the multiply-high reduction of one draw."""
        return (self.next() * n) >> 64


def derive_seed(seed: int, index: int) -> int:
    """The ``index``-th output of the splitmix64 stream seeded with ``seed``."""
    return splitmix64_mix((seed + (index + 1) * GOLDEN_GAMMA) & MASK64)


class XorShift64Star:
    """xorshift64* (12, 25, 27) stream seeded through splitmix64."""

    def __init__(self, seed: int) -> None:
        state = derive_seed(seed, 0)
        self.state = state if state != 0 else GOLDEN_GAMMA

    def next(self) -> int:
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & MASK64
        s ^= s >> 27
        self.state = s
        return (s * _XS_MULT) & MASK64

    def raw(self, n: int) -> list[int]:
        s = self.state
        out = [0] * n
        for i in range(n):
            s ^= s >> 12
            s ^= (s << 25) & MASK64
            s ^= s >> 27
            out[i] = (s * _XS_MULT) & MASK64
        self.state = s
        return out

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each draw."""
        if n == 0:
            return np.zeros(0)
        words = np.array(self.raw(n), dtype=np.uint64)
        return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self) -> float:
        return (self.next() >> 11) * _INV_2_53

    def normals(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; each pair of uniforms yields two values."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

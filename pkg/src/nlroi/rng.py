"""Deterministic SplitMix64 pseudo-random number generator.

The generator is counter-based: output k is a fixed bit mix of
``seed + k * GAMMA`` (mod 2**64), so a whole block of outputs can be
produced with vectorized integer arithmetic while remaining bit-identical
to stepping the generator one value at a time. Uniform doubles come from
the top 53 bits of each 64-bit output, giving values in [0, 1) that are
exactly reproducible on any platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53_INV = 2.0**-53


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 stream seeded with a 64-bit integer."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = (z ^ (z >> 30)) * _MIX1 & _MASK64
        z = (z ^ (z >> 27)) * _MIX2 & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """One double in [0, 1) from the top 53 bits of the next output."""
        return (self.next_u64() >> 11) * _TWO53_INV

    def uniforms(self, count: int) -> np.ndarray:
        """`count` uniform doubles, bit-identical to calling uniform() in a loop."""
        if count == 0:
            return np.zeros(0)
        ks = np.uint64(self._state) + np.uint64(_GAMMA) * np.arange(
            1, count + 1, dtype=np.uint64
        )
        self._state = (self._state + count * _GAMMA) & _MASK64
        return (_mix_array(ks) >> np.uint64(11)).astype(np.float64) * _TWO53_INV

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + self.uniform() * (hi - lo)

    def uniforms_in(self, count: int, lo: float, hi: float) -> np.ndarray:
        return lo + self.uniforms(count) * (hi - lo)

    def normals(self, count: int) -> np.ndarray:
        """Standard normal deviates via Box-Muller; consumes 2 uniforms each."""
        u = self.uniforms(2 * count)
        u1 = u[0::2]
        u2 = u[1::2]
        # 1 - u1 lies in (0, 1], keeping the log argument strictly positive.
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        return r * np.cos(2.0 * np.pi * u2)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return self.next_u64() % n

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n) via a partial Fisher-Yates shuffle."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} indices from range({n})")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

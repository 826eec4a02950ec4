"""SplitMix64 random streams.

Every random draw in the package (scenario noise, parameter init, shuffling,
dropout masks, noise trajectories) comes from this generator so that a run is
a pure function of its seed.

The stream is counter based. With ``GOLDEN = 0x9E3779B97F4A7C15`` the i-th
output (i = 1, 2, ...) of a stream whose state is ``s`` is
``mix64(s + i * GOLDEN)`` modulo 2**64, where::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniform doubles use the top 53 bits: ``(u64 >> 11) * 2**-53``.

Named sub-streams are derived with ``derive_seed(seed, name)``, which is
``mix64(seed ^ fnv1a64(utf8(name)))``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, name: str) -> int:
    """Seed of the sub-stream called ``name`` under ``seed``."""
    return mix64((seed & MASK64) ^ fnv1a64(name.encode("utf-8")))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # in place on a fresh array; uint64 arithmetic wraps modulo 2**64
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


class SplitMix64:
    """A SplitMix64 stream with scalar and vectorised draws.

    Scalar and bulk draws advance the same counter, so
    ``[r.next_u64() for _ in range(n)]`` equals ``r.u64_array(n)`` drawn
    from an identically seeded stream.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def named(cls, seed: int, name: str) -> "SplitMix64":
        return cls(derive_seed(seed, name))

    def spawn(self, name: str) -> "SplitMix64":
        """Independent child stream; does not advance this stream."""
        return SplitMix64(derive_seed(self.state, name))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps *= np.uint64(GOLDEN)
            steps += np.uint64(self.state)
            out = _mix64_array(steps)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * _INV_2_53
        return low + (high - low) * u

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return (low + (high - low) * u).reshape(shape)

    def integer(self, low: int, high: int) -> int:
        """Integer uniform on the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        return low + min(int(self.uniform() * span), span - 1)

    def choice(self, weights) -> int:
        """Index drawn with probability proportional to ``weights``."""
        total = float(sum(weights))
        u = self.uniform() * total
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of uniform keys; ties (p ~ 2**-53) fall back to index order
        return np.argsort(self.uniform_array(n), kind="stable")

    def keep_mask(self, shape, keep_prob: float) -> np.ndarray:
        """Boolean Bernoulli(keep_prob) mask."""
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        threshold = np.uint64(int(keep_prob * (1 << 53)))
        return ((self.u64_array(n) >> np.uint64(11)) < threshold).reshape(shape)

"""Deterministic pseudo-random numbers.

Every stochastic element of the toolkit (noise injection, synthetic
adapters, test data) draws from this generator so that artifacts are
reproducible bit-for-bit across runs and platforms.  The core is the
splitmix64 finalizer applied to ``seed + counter``: a counter-based
scheme, so a stream is a pure function of its seed.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U64_MASK = 0xFFFFFFFFFFFFFFFF


def mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


class Rng:
    """Counter-based splitmix64 stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        base = np.uint64(self.seed)
        with np.errstate(over="ignore"):
            ctr = np.arange(self._counter, self._counter + n, dtype=np.uint64)
            words = mix64(base + ctr * _GOLDEN)
        self._counter += n
        return words

    def _unit(self, n: int) -> np.ndarray:
        # 53-bit mantissa draw in [0, 1)
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        """fp32 samples uniform in [lo, hi)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = self._unit(n)
        out = (lo + (hi - lo) * u).astype(np.float32)
        return out.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """fp32 standard-normal samples via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._unit(pairs)  # (0, 1], keeps log finite
        u2 = self._unit(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.astype(np.float32).reshape(shape)

    def integers(self, lo: int, hi: int, shape) -> np.ndarray:
        """int64 samples uniform in [lo, hi)."""
        if hi <= lo:
            raise ValueError("empty integer range")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = np.uint64(hi - lo)
        vals = (self._raw(n) % span).astype(np.int64) + lo
        return vals.reshape(shape)

    def child(self, tag: str) -> "Rng":
        """Independent stream derived from a string tag."""
        h = np.uint64(self.seed)
        with np.errstate(over="ignore"):
            for b in tag.encode("utf-8"):
                h = mix64(np.uint64((int(h) + b + 1) & _U64_MASK))
        return Rng(int(h))

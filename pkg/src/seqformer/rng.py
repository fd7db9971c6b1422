"""Portable, seed-pinned random streams.

Every random draw in the package comes from a xoshiro256** bit stream whose
256-bit state is filled by splitmix64 from a 64-bit seed. Uniforms and
normals are derived from the raw 64-bit outputs here, not by numpy's
distribution code, so a seed yields the same numbers on any platform and
numpy version.

Stage streams are derived as ``sha256(f"{seed}:{stage}")[:8]`` read as a
little-endian unsigned 64-bit integer.
"""

from __future__ import annotations

import hashlib

import numpy as np
from randomgen import Xoshiro256

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def splitmix64(seed: int, n: int = 4) -> list[int]:
    """Return ``n`` successive splitmix64 outputs starting from ``seed``."""
    x = seed & _MASK64
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """xoshiro256** stream with the handful of distributions the package needs."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = Xoshiro256(0)
        state = self._bits.state
        state["s"] = np.array(splitmix64(self.seed), dtype=np.uint64)
        state["has_uint32"] = 0
        state["uinteger"] = 0
        self._bits.state = state

    @classmethod
    def for_stage(cls, seed: int, stage: str) -> "Rng":
        return cls(derive_seed(seed, stage))

    def spawn(self, stage: str) -> "Rng":
        return Rng(derive_seed(self.seed, stage))

    def raw(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, low=0.0, high=1.0, size=()) -> np.ndarray | float:
        """Uniform doubles on [low, high) from the top 53 bits of each draw."""
        n = int(np.prod(size, dtype=np.int64)) if size != () else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size == () else u.reshape(size)

    def normal(self, loc=0.0, scale=1.0, size=()) -> np.ndarray | float:
        """Box-Muller normals; each pair of uniforms yields two deviates."""
        n = int(np.prod(size, dtype=np.int64)) if size != () else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=(m,))  # (0, 1], keeps log finite
        u2 = self.uniform(size=(m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size == () else z.reshape(size)

    def integers(self, low: int, high: int, size=()) -> np.ndarray | int:
        """Integers on [low, high) by multiply-shift of 32-bit draws (bias < 2**-32 * span)."""
        n = int(np.prod(size, dtype=np.int64)) if size != () else 1
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        top = (self.raw(n) >> np.uint64(32)).astype(np.uint64)
        vals = ((top * np.uint64(span)) >> np.uint64(32)).astype(np.int64) + low
        return int(vals[0]) if size == () else vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.uniform(size=(n - 1,))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]

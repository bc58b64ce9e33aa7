"""Counter-based SplitMix64 generator.

Every random draw in the package goes through this so that a seed gives
the same bits on every platform, independent of numpy's own generators.

Constants (Steele, Lea & Flood 2014):
    state  += 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z ^= z >> 31
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GAMMA
            out = _mix(z)
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return out

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Float64 draws in [lo, hi)."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normal float64 draws (Box-Muller)."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """Integers in [lo, hi)."""
        return lo + np.floor(self.uniform(n) * (hi - lo)).astype(np.int64)

    def bernoulli(self, n: int, p: float) -> np.ndarray:
        return self.uniform(n) < p


def derive_seed(seed: int, *salt: int) -> int:
    """Deterministically mix extra integers into a seed."""
    z = np.array([int(seed) & _MASK], dtype=np.uint64)
    for s in salt:
        with np.errstate(over="ignore"):
            z = _mix(z ^ np.uint64(int(s) & _MASK) + GAMMA)
    return int(z[0])

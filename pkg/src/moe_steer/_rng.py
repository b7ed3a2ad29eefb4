"""Counter-based SplitMix64 generator.

All simulator parameters and task draws come from this generator rather than
``numpy.random`` so that a given seed yields the same bits on any platform or
numpy version. The algorithm is the SplitMix64 finalizer applied to the
sequence ``state + i * GAMMA`` (Steele, Lea & Flood 2014).
"""

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


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

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller, consuming 2*ceil(n/2) draws."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on 53-bit uniforms."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def fork(self, name: str) -> "SplitMix64":
        """Independent child stream keyed by ``name``; does not advance self."""
        with np.errstate(over="ignore"):
            z = _mix(np.array([self.state ^ fnv1a64(name)], dtype=np.uint64))
        return SplitMix64(int(z[0]))

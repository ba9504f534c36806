"""Deterministic weight-initialization PRNG: splitmix64-seeded xoshiro256**.

Weight draws must be reproducible bit-for-bit across platforms and numpy
versions, so the generator is fixed here rather than delegated to numpy's
default bit generator. The scheme:

* splitmix64(seed) produces a stream of 64-bit words; the first ``4 * lanes``
  words fill the state of ``lanes`` independent xoshiro256** generators
  (lane-major: lane 0 gets words 0..3, lane 1 gets words 4..7, ...).
* Each call steps every lane once, yielding ``lanes`` outputs; the combined
  stream interleaves lanes, so draw ``i`` comes from lane ``i % lanes`` at
  step ``i // lanes``.
* Doubles in [0, 1) are the top 53 bits of each output times 2**-53.

All lane arithmetic is vectorized uint64 numpy with wraparound semantics.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_U64 = np.uint64


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First n outputs of the splitmix64 stream for the given seed."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out[i] = (z ^ (z >> 31)) & mask
    return out


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Xoshiro256StarStar:
    """Lane-parallel xoshiro256** stream, splitmix64-seeded."""

    def __init__(self, seed: int, lanes: int = 1024):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = lanes
        state = splitmix64(seed, 4 * lanes).reshape(lanes, 4).T.copy()
        self._s = [state[0], state[1], state[2], state[3]]

    def next_block(self) -> np.ndarray:
        """One xoshiro step for every lane; returns (lanes,) uint64."""
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uint64(self, n: int) -> np.ndarray:
        """Next n raw outputs in interleaved lane order."""
        steps = -(-n // self.lanes)
        buf = np.empty((steps, self.lanes), dtype=np.uint64)
        for i in range(steps):
            buf[i] = self.next_block()
        return buf.reshape(-1)[:n]

    def uniform(self, n: int) -> np.ndarray:
        """Next n doubles in [0, 1)."""
        bits = self.uint64(n) >> _U64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def he_uniform(self, fan_in: int, n: int) -> np.ndarray:
        """n draws from U(-limit, limit) with limit = sqrt(6 / fan_in)."""
        limit = np.sqrt(6.0 / fan_in)
        return (2.0 * self.uniform(n) - 1.0) * limit

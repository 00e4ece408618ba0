"""Deterministic pseudo-randomness for the whole repo.

Every random draw (dataset generation, parameter init, training schedules)
comes from xoshiro256++ seeded through splitmix64, so runs are reproducible
bit-for-bit from a single integer seed.  Uniform floats are derived from the
top 53 bits of a 64-bit word; Gaussians use Box-Muller on those uniforms.

Bulk Gaussian noise (image rasterization) uses a lane-parallel variant:
``LANES`` independent xoshiro states stepped together with numpy uint64
arithmetic, which is exact and wrap-around by construction.  The only
platform-sensitive parts are libm's log/sqrt/sin/cos inside Box-Muller;
integer and uniform-float output is exact everywhere.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_U53 = 1.0 / (1 << 53)

LANES = 4096


def splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, (z ^ (z >> 31)) & MASK64


def seed_sequence(seed: int, n: int) -> list[int]:
    """First n splitmix64 outputs for `seed`; used to derive sub-seeds."""
    state = seed & MASK64
    out = []
    for _ in range(n):
        state, v = splitmix64_next(state)
        out.append(v)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256pp:
    """Scalar xoshiro256++ stream, seeded via splitmix64."""

    def __init__(self, seed: int):
        self.s = seed_sequence(seed, 4)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1), from the top 53 bits."""
        return (self.next_u64() >> 11) * _U53

    def uniform_open(self) -> float:
        """Uniform in (0, 1]; never returns 0 (safe for logs and (0,1] draws)."""
        return ((self.next_u64() >> 11) + 1) * _U53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Uniform integer in {0, ..., n-1} via 128-bit multiply-shift."""
        return (self.next_u64() * n) >> 64

    def gauss(self) -> float:
        u1 = self.uniform_open()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [self.gauss() * scale for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def shuffled(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


class LaneXoshiro:
    """LANES parallel xoshiro256++ streams for bulk draws.

    Lane i is seeded from splitmix64(seed) outputs 4*i..4*i+3, so the whole
    block of output is a pure function of `seed`.
    """

    def __init__(self, seed: int, lanes: int = LANES):
        self.lanes = lanes
        seeds = seed_sequence(seed, 4 * lanes)
        arr = np.array(seeds, dtype=np.uint64).reshape(lanes, 4)
        self.s = [arr[:, i].copy() for i in range(4)]

    def _next_block(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        tmp = (s0 + s3) & np.uint64(MASK64)
        result = ((tmp << np.uint64(23)) | (tmp >> np.uint64(41))) + s0
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        self.s = [s0, s1, s2, s3]
        return result

    def uniforms(self, n: int) -> np.ndarray:
        """n uniforms in (0, 1], lane-major order."""
        blocks = []
        got = 0
        while got < n:
            blocks.append(self._next_block())
            got += self.lanes
        u = np.concatenate(blocks)[:n]
        return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * _U53

    def normals(self, n: int, scale: float = 1.0) -> np.ndarray:
        """n standard Gaussians (scaled) via Box-Muller."""
        half = (n + 1) // 2
        u1 = self.uniforms(half)
        u2 = self.uniforms(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * scale

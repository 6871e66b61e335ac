"""Deterministic PCG32 random streams.

Every random draw in the package flows through a ``Rng`` so that any pipeline
stage replays bit-for-bit from a ``(seed, stream)`` pair on any platform.  The
generator is the classic PCG32 (XSH-RR output function, 64-bit LCG state);
Python integers stand in for uint64 arithmetic.
"""
from __future__ import annotations

import math

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1
_TWO32 = float(1 << 32)


class Rng:
    """A single PCG32 stream."""

    __slots__ = ("state", "inc")

    def __init__(self, seed: int, stream: int = 0):
        self.inc = (((stream & _MASK64) << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self._step()

    def _step(self):
        self.state = (self.state * _MULT + self.inc) & _MASK64

    def u32(self) -> int:
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self) -> float:
        """Uniform real in [0, 1)."""
        return self.u32() / _TWO32

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection on the tail)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (1 << 32) - ((1 << 32) % n)
        while True:
            u = self.u32()
            if u < limit:
                return u % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; uses two uniforms per call."""
        # u1 in (0, 1] so the log is finite
        u1 = (self.u32() + 1) / _TWO32
        u2 = self.u32() / _TWO32
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> list[float]:
        return [self.normal() for _ in range(n)]

    def categorical(self, probs) -> int:
        """Inverse-CDF sample with a single uniform draw.

        Boundary ties resolve toward the lower index; zero-probability
        categories are never selected.
        """
        if len(probs) == 0:
            raise ValueError("empty categorical")
        u = self.uniform()
        acc = 0.0
        last_positive = -1
        for i, p in enumerate(probs):
            if p <= 0.0:
                continue
            acc += p
            last_positive = i
            if u <= acc:
                return i
        if last_positive < 0:
            raise ValueError("empty categorical")
        # float drift can leave acc marginally below 1
        return last_positive

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]


def rng_stream(seed: int, stream: int) -> Rng:
    """Independent reproducible stream; equal (seed, stream) means equal draws."""
    return Rng(seed, stream)

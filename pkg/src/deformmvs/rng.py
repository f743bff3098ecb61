"""Deterministic, splittable random streams.

Every randomized stage of the pipeline draws from a SplitMix64 stream derived
from (seed, purpose, pixel/iteration keys). Streams are cheap to derive and
independent of thread scheduling, which is what makes reconstructions
bit-identical across runs and across thread counts. The same generator is
re-implemented inside the numba kernels (see _kernels.py); the two must stay
in lockstep, which is covered by a cross-equality test.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """Finalizing mix of SplitMix64; bijective on 64-bit ints."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def next_u64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state, returning (new_state, draw)."""
    state = (state + _GAMMA) & _MASK
    return state, mix64(state)


def derive_state(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed to get an independent stream state."""
    state = mix64(seed & _MASK)
    for k in keys:
        state = mix64(state ^ mix64((k & _MASK) + _GAMMA))
    return state


class RandomStream:
    """Stateful wrapper over SplitMix64 used as the explicit rng_state argument."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = derive_state(seed)

    @classmethod
    def from_state(cls, state: int) -> "RandomStream":
        rs = cls.__new__(cls)
        rs.state = state & _MASK
        return rs

    def split(self, *keys: int) -> "RandomStream":
        """Independent child stream; does not advance this stream."""
        return RandomStream.from_state(derive_state(self.state, *keys))

    def next_u64(self) -> int:
        self.state, z = next_u64(self.state)
        return z

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (2.0 ** -53)
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is negligible for small n."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

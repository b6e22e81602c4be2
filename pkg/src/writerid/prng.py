"""SplitMix64, the documented generator behind every dataset split.

A single 64-bit word of state advances by a fixed odd increment; each output
passes through a two-round xorshift/multiply finalizer.  The constants are
spelled out so a partition can be replayed from its seed alone, in any
language, without depending on a runtime's default RNG.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_INCREMENT = 0x9E3779B97F4A7C15
_MULT1 = 0xBF58476D1CE4E5B9
_MULT2 = 0x94D049BB133111EB


class SplitMix64:
    """Deterministic 64-bit stream; the seed fully determines every draw."""

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_uint64(self) -> int:
        self._state = (self._state + _INCREMENT) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MULT1) & _MASK64
        z = ((z ^ (z >> 27)) * _MULT2) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound), by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        span = _MASK64 + 1
        limit = span - (span % bound)
        while True:
            v = self.next_uint64()
            if v < limit:
                return v % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, consuming one draw per position."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

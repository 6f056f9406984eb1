"""Seed-stable 64-bit mixing PRNG used for shuffles and stream derivation.

The recurrence is SplitMix64 (Steele, Lea, Flood 2014):

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. Shuffles are Fisher-Yates from the last index
down, drawing ``j = next() % (i + 1)``. Sub-streams are keyed by
``derive(seed, *keys)``, which folds each key into the state through one
SplitMix64 output. Everything here is integer-exact, so splits and batch
orders can be reproduced by any implementation of the same recurrence.
"""

from __future__ import annotations

from typing import MutableSequence, Sequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

T = TypeVar("T")


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: MutableSequence[T]) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]

    def shuffled(self, items: Sequence[T]) -> list[T]:
        out = list(items)
        self.shuffle(out)
        return out


def derive(seed: int, *keys: int) -> int:
    """Derive a sub-stream seed from ``seed`` and integer keys."""
    state = seed & MASK64
    for key in keys:
        state = _mix((state + GOLDEN + (key & MASK64) * MIX1) & MASK64)
    return state

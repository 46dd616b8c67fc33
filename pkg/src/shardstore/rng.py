"""Portable deterministic randomness.

Every seeded behaviour in the package (epoch shuffles, reshard orders,
shuffle buffers, synthetic name generation) runs on the splitmix64
generator defined here, so the same seed reproduces the same sequence on
any platform and Python version.  The stdlib ``random`` module is
deliberately not used for anything that must replay.

Seed-split scheme: derived streams are seeded with ``mix64(seed, *labels)``
where labels are small integers (epoch number, worker index, a stream tag).
``mix64`` folds each value through the splitmix64 finalizer, so any change
to any label yields an unrelated stream.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence, TypeVar

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive)."""
    acc = 0
    for v in values:
        acc = _finalize((acc + _GAMMA + (v & _MASK64)) & _MASK64)
    return acc


class SplitMix64:
    """splitmix64 stream generator (Steele, Lea & Flood 2014)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _finalize(self._state)

    def randbelow(self, n: int) -> int:
        # Modulo bias is ~n/2**64: irrelevant at the n this package uses.
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return self.next_u64() % n

    def shuffle(self, seq: List[T]) -> None:
        """In-place Fisher-Yates shuffle (descending index)."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def hex_name(self, bits: int = 128) -> str:
        """Random lowercase hex string of the given bit width."""
        words = (bits + 63) // 64
        value = 0
        for _ in range(words):
            value = (value << 64) | self.next_u64()
        return format(value, "0{}x".format(bits // 4))


def permuted(items: Sequence[T], seed: int) -> List[T]:
    """Fisher-Yates permutation of ``items`` under a fresh stream."""
    out = list(items)
    SplitMix64(seed).shuffle(out)
    return out


def drain_order(items: Iterable[T], rng: SplitMix64) -> List[T]:
    """Emit items by repeated uniform extraction with swap-to-last.

    This is the selection rule the shuffle buffer uses when draining, kept
    here so planning code and the buffer share one definition.
    """
    pool = list(items)
    out: List[T] = []
    while pool:
        j = rng.randbelow(len(pool))
        out.append(pool[j])
        pool[j] = pool[-1]
        pool.pop()
    return out

"""64-bit hashing for placement and object checksums.

Both uses ride on xxHash64 (seed 0): placement scores because rendezvous
ranking needs a fast, well-dispersed keyed hash, and content checksums
because a 64-bit digest is cheap enough to verify on every read.
"""

from __future__ import annotations

import xxhash

CHECKSUM_ALGO = "xxh64"


def hash64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return xxhash.xxh64(data, seed=0).intdigest()


def placement_score(bucket: str, name: str, candidate: str) -> int:
    """Rendezvous score of one candidate for one object."""
    return hash64(f"{bucket}/{name}#{candidate}")


class Checksummer:
    """Incremental xxh64 over a byte stream."""

    def __init__(self) -> None:
        self._h = xxhash.xxh64(seed=0)

    def update(self, chunk: bytes) -> None:
        self._h.update(chunk)

    def hexdigest(self) -> str:
        return self._h.hexdigest()


def checksum_bytes(data: bytes) -> str:
    return xxhash.xxh64(data, seed=0).hexdigest()

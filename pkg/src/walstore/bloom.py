"""Per-cell bloom filter for rejecting never-written keys.

Sized at ~10 bits per expected key with 7 probes (~1% false positives).
Capacity is not known up front, so the filter grows as a chain of
progressively larger sub-filters; membership checks every link, which keeps
the no-false-negative guarantee unconditional.
"""

from __future__ import annotations

import hashlib
import struct

PROBES = 7
BITS_PER_KEY = 10


class _Filter:
    __slots__ = ("bits", "nbits", "capacity", "count")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.nbits = max(64, capacity * BITS_PER_KEY)
        self.bits = bytearray((self.nbits + 7) // 8)
        self.count = 0

    def add(self, h1: int, h2: int) -> None:
        nbits = self.nbits
        bits = self.bits
        for i in range(PROBES):
            idx = (h1 + i * h2) % nbits
            bits[idx >> 3] |= 1 << (idx & 7)
        self.count += 1

    def contains(self, h1: int, h2: int) -> bool:
        nbits = self.nbits
        bits = self.bits
        for i in range(PROBES):
            idx = (h1 + i * h2) % nbits
            if not bits[idx >> 3] & (1 << (idx & 7)):
                return False
        return True


def _hash_pair(key: bytes) -> tuple[int, int]:
    digest = hashlib.blake2b(key, digest_size=16).digest()
    return struct.unpack("<QQ", digest)


def hash_key(key: bytes) -> tuple[int, int]:
    """Bloom hash pair for a key; exposed so callers can hash outside locks."""
    return _hash_pair(key)


class BloomFilter:
    """Growing bloom filter over byte keys; never reports a false negative."""

    __slots__ = ("_filters",)

    def __init__(self, initial_capacity: int = 1024):
        self._filters = [_Filter(initial_capacity)]

    def add(self, key: bytes) -> None:
        self.add_hashed(*_hash_pair(key))

    def add_hashed(self, h1: int, h2: int) -> None:
        current = self._filters[-1]
        if current.count >= current.capacity:
            current = _Filter(current.capacity * 2)
            self._filters.append(current)
        current.add(h1, h2)

    def may_contain(self, key: bytes) -> bool:
        h1, h2 = _hash_pair(key)
        return any(f.contains(h1, h2) for f in self._filters)

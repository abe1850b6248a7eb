"""Serialization and lookup for persistent per-cell indices.

Two formats over the same 40-byte entries (32-byte key, 8-byte log position,
little-endian, strictly ascending by key):

* the flat format: a bare sorted array searched optimistically from a
  position estimate derived from the key's value, shifting a fixed-size
  window until the key range brackets the target;
* the header format: a 1 KiB header of 128 bucket offsets (keys bucketed by
  the top 7 bits of their first byte) followed by the same entry array, so
  every lookup costs exactly two reads.

All functions are pure over immutable byte sources and safe for unlimited
concurrent use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Protocol

from .errors import CorruptionError

KEY_SIZE = 32
ENTRY_SIZE = 40
HEADER_BUCKETS = 128
HEADER_SIZE = HEADER_BUCKETS * 8

#: High bit of a stored position marks the entry as a carried tombstone.
TOMBSTONE_BIT = 1 << 63


@dataclass(frozen=True)
class IndexEntry:
    key: bytes
    position: int

    def is_tombstone(self) -> bool:
        return bool(self.position & TOMBSTONE_BIT)

    def wal_position(self) -> int:
        return self.position & ~TOMBSTONE_BIT


@dataclass(frozen=True)
class WindowConfig:
    window_entries: int = 800

    def __post_init__(self) -> None:
        if self.window_entries < 2:
            raise ValueError("window_entries must be >= 2")


@dataclass(frozen=True)
class LookupOutcome:
    position: Optional[int]
    iterations: int


class ByteSource(Protocol):
    """Random-access byte source; `length` is the total readable size."""

    length: int

    def read_at(self, offset: int, length: int) -> bytes: ...


class BytesSource:
    __slots__ = ("_data", "length")

    def __init__(self, data: bytes):
        self._data = data
        self.length = len(data)

    def read_at(self, offset: int, length: int) -> bytes:
        return self._data[offset:offset + length]


class FileSource:
    """pread-based source over an open binary file object."""

    __slots__ = ("_fileno", "length")

    def __init__(self, fileno: int, length: int):
        self._fileno = fileno
        self.length = length

    def read_at(self, offset: int, length: int) -> bytes:
        import os
        return os.pread(self._fileno, length, offset)


class CountingSource:
    """Wraps a source, counting read calls and bytes; used by tests and the
    index microbenchmark to assert read-volume contracts."""

    __slots__ = ("inner", "length", "reads", "bytes_read")

    def __init__(self, inner: ByteSource):
        self.inner = inner
        self.length = inner.length
        self.reads = 0
        self.bytes_read = 0

    def read_at(self, offset: int, length: int) -> bytes:
        self.reads += 1
        self.bytes_read += length
        return self.inner.read_at(offset, length)


def _check_entries(entries: list[IndexEntry]) -> None:
    prev = None
    for entry in entries:
        if len(entry.key) != KEY_SIZE:
            raise ValueError(f"index key must be {KEY_SIZE} bytes")
        if prev is not None and entry.key <= prev:
            raise ValueError("index entries must be strictly ascending")
        prev = entry.key


def serialize_flat(entries: list[IndexEntry]) -> bytes:
    """Serialize ascending entries into the bare sorted-array format."""
    _check_entries(entries)
    return b"".join(e.key + struct.pack("<Q", e.position) for e in entries)


def load_all(reader: ByteSource, n: int) -> list[IndexEntry]:
    """Deserialize a whole flat index of `n` entries; inverse of serialize_flat."""
    data = reader.read_at(0, n * ENTRY_SIZE)
    return entries_from_bytes(data)


def entries_from_bytes(data: bytes) -> list[IndexEntry]:
    if len(data) % ENTRY_SIZE:
        raise CorruptionError("index length not a multiple of the entry size")
    entries = []
    prev = None
    for off in range(0, len(data), ENTRY_SIZE):
        key = data[off:off + KEY_SIZE]
        if prev is not None and key <= prev:
            raise CorruptionError("index entries out of order")
        prev = key
        entries.append(IndexEntry(key, struct.unpack_from("<Q", data, off + KEY_SIZE)[0]))
    return entries


def estimate_entry_index(key: bytes, n: int) -> int:
    """Expected sorted position of a uniformly distributed 32-byte key:
    floor((key / 2^256) * n), exact integer arithmetic, clamped to [0, n-1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes")
    est = (int.from_bytes(key, "big") * n) >> 256
    return min(est, n - 1)


def _bisect_window(data: bytes, count: int, key: bytes) -> Optional[int]:
    lo, hi = 0, count
    while lo < hi:
        mid = (lo + hi) // 2
        mid_key = data[mid * ENTRY_SIZE:mid * ENTRY_SIZE + KEY_SIZE]
        if mid_key < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < count and data[lo * ENTRY_SIZE:lo * ENTRY_SIZE + KEY_SIZE] == key:
        return struct.unpack_from("<Q", data, lo * ENTRY_SIZE + KEY_SIZE)[0]
    return None


def optimistic_lookup(reader: ByteSource, n: int, key: bytes,
                      cfg: WindowConfig = WindowConfig()) -> LookupOutcome:
    """Search a flat index by window-shifting from the estimated position.

    Windows are 40-byte-aligned reads of min(W, n) entries; adjacent windows
    overlap by exactly one entry, so shifting by W-1 can never skip a key.
    """
    if n == 0:
        return LookupOutcome(None, 0)
    w = min(cfg.window_entries, n)
    start = min(max(estimate_entry_index(key, n) - w // 2, 0), n - w)
    iterations = 0
    while True:
        data = reader.read_at(start * ENTRY_SIZE, w * ENTRY_SIZE)
        iterations += 1
        if len(data) < w * ENTRY_SIZE:
            raise CorruptionError("index shorter than declared entry count")
        first = data[:KEY_SIZE]
        last = data[(w - 1) * ENTRY_SIZE:(w - 1) * ENTRY_SIZE + KEY_SIZE]
        if first > last:
            raise CorruptionError("index window out of order")
        if key < first:
            if start == 0:
                return LookupOutcome(None, iterations)
            start = max(0, start - (w - 1))
        elif key > last:
            if start + w >= n:
                return LookupOutcome(None, iterations)
            start = min(n - w, start + (w - 1))
        else:
            return LookupOutcome(_bisect_window(data, w, key), iterations)


def serialize_header(entries: list[IndexEntry]) -> bytes:
    """Serialize entries with a 128-slot bucket header.

    Bucket b holds entries whose top 7 key bits equal b; each slot stores the
    byte offset of the bucket's first entry relative to the end of the
    header, and empty buckets store the next bucket's start.
    """
    _check_entries(entries)
    counts = [0] * HEADER_BUCKETS
    for entry in entries:
        counts[entry.key[0] >> 1] += 1
    offsets = []
    acc = 0
    for b in range(HEADER_BUCKETS):
        offsets.append(acc)
        acc += counts[b] * ENTRY_SIZE
    header = struct.pack(f"<{HEADER_BUCKETS}Q", *offsets)
    return header + b"".join(e.key + struct.pack("<Q", e.position) for e in entries)


def header_lookup(reader: ByteSource, key: bytes) -> Optional[int]:
    """Look up a key in a header-format index using exactly two reads."""
    if len(key) != KEY_SIZE:
        raise ValueError(f"key must be {KEY_SIZE} bytes")
    bucket = key[0] >> 1
    if bucket == HEADER_BUCKETS - 1:
        raw = reader.read_at(bucket * 8, 8)
        begin = struct.unpack("<Q", raw)[0]
        end = reader.length - HEADER_SIZE
    else:
        raw = reader.read_at(bucket * 8, 16)
        begin, end = struct.unpack("<QQ", raw)
    data = reader.read_at(HEADER_SIZE + begin, end - begin)
    count = (end - begin) // ENTRY_SIZE
    if count == 0:
        return None
    first = data[:KEY_SIZE]
    last = data[(count - 1) * ENTRY_SIZE:(count - 1) * ENTRY_SIZE + KEY_SIZE]
    if first > last:
        raise CorruptionError("index bucket out of order")
    return _bisect_window(data, count, key)

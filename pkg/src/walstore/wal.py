"""Append-only, position-addressed log backed by a directory of fragment files.

The same implementation serves two roles: the value log (permanent store for
key-value records) and the index log (serialized per-cell indices).  Records
are framed, CRC-checked, and addressed by a 64-bit byte offset from the
logical start of the log.  Frames never span fragments; the unusable tail of
a fragment is left as an implicit padding gap, marked processed at allocation
time.

Frame layout (all integers little-endian)::

    crc(4) | payload_len(4) | kind(1) | keyspace_id(1) | key_len(2) | key | value

``payload_len`` is ``len(key) + len(value)``; the CRC (CRC-32, ISO-HDLC
polynomial) covers every byte after the crc field.  A zeroed header is never
a valid frame, which is how replay recognizes a padding gap.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Optional

from .errors import CorruptionError, LogClosedError, OutOfRangeError

#: Sentinel for "no position"; all bits set.
NO_POSITION = 0xFFFF_FFFF_FFFF_FFFF

FRAME_HEADER = struct.Struct("<IIBBH")
FRAME_HEADER_SIZE = FRAME_HEADER.size  # 12
FRAGMENT_SUFFIX = ".wal"

_ZERO_HEADER = b"\x00" * FRAME_HEADER_SIZE


class RecordKind(IntEnum):
    PUT = 1
    TOMBSTONE = 2
    BATCH_START = 3


@dataclass(frozen=True)
class WalRecord:
    kind: RecordKind
    keyspace_id: int
    key: bytes
    value: bytes = b""

    @staticmethod
    def put(keyspace_id: int, key: bytes, value: bytes) -> "WalRecord":
        return WalRecord(RecordKind.PUT, keyspace_id, key, value)

    @staticmethod
    def tombstone(keyspace_id: int, key: bytes) -> "WalRecord":
        return WalRecord(RecordKind.TOMBSTONE, keyspace_id, key, b"")

    @staticmethod
    def batch_start(count: int) -> "WalRecord":
        return WalRecord(RecordKind.BATCH_START, 0, b"", struct.pack("<I", count))

    def batch_count(self) -> int:
        if self.kind is not RecordKind.BATCH_START:
            raise ValueError("not a batch-start record")
        return struct.unpack("<I", self.value)[0]


def encode_record(record: WalRecord) -> bytes:
    """Serialize a record into its on-disk frame."""
    key, value = record.key, record.value
    if len(key) > 0xFFFF:
        raise ValueError("key longer than 65535 bytes")
    body = (struct.pack("<IBBH", len(key) + len(value), record.kind,
                        record.keyspace_id, len(key)) + key + value)
    return struct.pack("<I", zlib.crc32(body)) + body


def decode_frame(frame: bytes) -> WalRecord:
    """Parse and CRC-verify one complete frame."""
    if len(frame) < FRAME_HEADER_SIZE:
        raise CorruptionError("frame shorter than header")
    crc, payload_len, kind, keyspace_id, key_len = FRAME_HEADER.unpack_from(frame)
    if len(frame) != FRAME_HEADER_SIZE + payload_len:
        raise CorruptionError("frame length mismatch")
    if zlib.crc32(frame[4:]) != crc:
        raise CorruptionError("frame CRC mismatch")
    if key_len > payload_len:
        raise CorruptionError("key length exceeds payload")
    try:
        rec_kind = RecordKind(kind)
    except ValueError as exc:
        raise CorruptionError(f"unknown record kind {kind}") from exc
    key = frame[FRAME_HEADER_SIZE:FRAME_HEADER_SIZE + key_len]
    value = frame[FRAME_HEADER_SIZE + key_len:]
    return WalRecord(rec_kind, keyspace_id, key, value)


def frame_size(record: WalRecord) -> int:
    return FRAME_HEADER_SIZE + len(record.key) + len(record.value)


@dataclass
class WalConfig:
    fragment_size_bytes: int = 64 * 1024 * 1024
    prealloc_fragments: int = 2
    sync_interval: float = 0.5

    def __post_init__(self) -> None:
        size = self.fragment_size_bytes
        if size <= 0 or size & (size - 1):
            raise ValueError("fragment_size_bytes must be a power of two")


class PositionTracker:
    """Tracks processed byte ranges and the contiguous watermark below which
    every byte belongs to a processed range or a padding gap."""

    def __init__(self, start: int = 0) -> None:
        self._last = start
        self._pending: dict[int, int] = {}  # range start -> range end
        self._cond = threading.Condition()

    def mark(self, start: int, end: int) -> None:
        if end <= start:
            return
        with self._cond:
            if end <= self._last:
                return
            self._pending[start] = max(end, self._pending.get(start, 0))
            advanced = False
            while self._last in self._pending:
                self._last = self._pending.pop(self._last)
                advanced = True
            if advanced:
                self._cond.notify_all()

    def last(self) -> int:
        with self._cond:
            return self._last

    def wait_for(self, target: int, timeout: Optional[float] = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._last >= target, timeout)


class _Fragment:
    """One fragment file plus its write/sync bookkeeping."""

    __slots__ = ("start", "size", "path", "fd", "written_high", "synced_len",
                 "finalized", "lock")

    def __init__(self, start: int, size: int, path: Path, create: bool):
        self.start = start
        self.size = size
        self.path = path
        flags = os.O_RDWR | (os.O_CREAT if create else 0)
        self.fd = os.open(path, flags, 0o644)
        self.written_high = 0 if create else os.fstat(self.fd).st_size
        self.synced_len = 0
        self.finalized = False
        self.lock = threading.Lock()

    def pwrite(self, offset: int, data: bytes) -> None:
        os.pwrite(self.fd, data, offset)
        end = offset + len(data)
        with self.lock:
            if end > self.written_high:
                self.written_high = end

    def pread(self, offset: int, length: int) -> bytes:
        return os.pread(self.fd, length, offset)

    def fsync(self) -> None:
        with self.lock:
            high = self.written_high
        os.fsync(self.fd)
        with self.lock:
            if high > self.synced_len:
                self.synced_len = high

    def close(self) -> None:
        try:
            os.close(self.fd)
        except OSError:
            pass


def _fragment_name(start: int) -> str:
    return f"{start:016x}{FRAGMENT_SUFFIX}"


class Wal:
    """A single append-only log under one directory.

    Thread model: any number of concurrent appenders and readers; one
    background sync agent and one GC agent.  Allocation hands out disjoint
    ranges; ``gc_before`` only removes fragments wholly below the watermark
    its caller guarantees.
    """

    def __init__(self, directory: str | os.PathLike, config: Optional[WalConfig] = None):
        self.directory = Path(directory)
        self.config = config or WalConfig()
        self.directory.mkdir(parents=True, exist_ok=True)
        self._alloc_lock = threading.Lock()
        self._frag_lock = threading.Lock()
        self._fragments: dict[int, _Fragment] = {}
        self._closed = False
        self._tail = 0
        self._recover_layout()
        self.tracker = PositionTracker(self._tail)

    # ------------------------------------------------------------------
    # startup / shutdown

    def _recover_layout(self) -> None:
        """Enumerate fragment files, locate the end of the last valid frame,
        and drop any bytes beyond it so stale frames can never resurface."""
        size = self.config.fragment_size_bytes
        starts = []
        for entry in self.directory.iterdir():
            if entry.name.endswith(FRAGMENT_SUFFIX):
                try:
                    start = int(entry.name[:-len(FRAGMENT_SUFFIX)], 16)
                except ValueError:
                    continue
                if start % size:
                    raise CorruptionError(f"fragment {entry.name} misaligned")
                starts.append(start)
        starts.sort()
        for start in starts:
            self._fragments[start] = _Fragment(
                start, size, self.directory / _fragment_name(start), create=False)
        if not starts:
            self._tail = 0
            return
        tail = starts[0]
        for _, pos, length in self._iter_frames(starts[0], decode=False):
            tail = pos + length
        self._tail = tail
        for start in sorted(self._fragments):
            frag = self._fragments[start]
            if start > tail:
                self._fragments.pop(start)
                frag.close()
                frag.path.unlink(missing_ok=True)
            elif start <= tail < start + size:
                os.ftruncate(frag.fd, tail - start)
                with frag.lock:
                    frag.written_high = tail - start

    def close(self) -> None:
        with self._alloc_lock:
            self._closed = True
        with self._frag_lock:
            frags = list(self._fragments.values())
        for frag in frags:
            frag.close()

    # ------------------------------------------------------------------
    # geometry helpers

    def tail(self) -> int:
        with self._alloc_lock:
            return self._tail

    def min_position(self) -> int:
        with self._frag_lock:
            if not self._fragments:
                return self._tail
            return min(self._fragments)

    def disk_bytes(self) -> int:
        """Total bytes currently held by fragment files."""
        with self._frag_lock:
            frags = list(self._fragments.values())
        total = 0
        for frag in frags:
            try:
                total += os.fstat(frag.fd).st_size
            except OSError:
                pass
        return total

    def _fragment_for(self, position: int) -> _Fragment:
        start = position - (position % self.config.fragment_size_bytes)
        frag = self._fragments.get(start)
        if frag is None:
            raise OutOfRangeError(f"no fragment covering position {position}")
        return frag

    def _ensure_fragment(self, start: int) -> _Fragment:
        frag = self._fragments.get(start)
        if frag is None:
            with self._frag_lock:
                frag = self._fragments.get(start)
                if frag is None:
                    frag = _Fragment(start, self.config.fragment_size_bytes,
                                     self.directory / _fragment_name(start), create=True)
                    self._fragments[start] = frag
        return frag

    # ------------------------------------------------------------------
    # core operations

    def allocate(self, record_len: int) -> int:
        """Reserve `record_len` contiguous bytes wholly inside one fragment.

        A fragment remainder too small for the record is skipped and
        auto-marked as processed padding.
        """
        size = self.config.fragment_size_bytes
        if record_len > size:
            raise ValueError("record larger than a fragment")
        gap = None
        with self._alloc_lock:
            if self._closed:
                raise LogClosedError("log is closed")
            pos = self._tail
            frag_start = pos - (pos % size)
            if pos + record_len > frag_start + size:
                gap = (pos, frag_start + size)
                pos = frag_start + size
                frag_start = pos
            self._tail = pos + record_len
            entered_new = pos == frag_start
        if entered_new:
            for i in range(max(1, self.config.prealloc_fragments)):
                self._ensure_fragment(frag_start + i * size)
        else:
            self._ensure_fragment(frag_start)
        if gap is not None:
            self.tracker.mark(*gap)
        return pos

    def write_at(self, position: int, record: WalRecord,
                 frame: Optional[bytes] = None) -> None:
        """Write a frame at an allocated position; visible to read_at on return."""
        if frame is None:
            frame = encode_record(record)
        frag = self._ensure_fragment(
            position - (position % self.config.fragment_size_bytes))
        frag.pwrite(position - frag.start, frame)

    def append(self, record: WalRecord, mark: bool = False) -> tuple[int, int]:
        """Allocate, write, and optionally mark one record; returns (position, length)."""
        frame = encode_record(record)
        pos = self.allocate(len(frame))
        self.write_at(pos, record, frame)
        if mark:
            self.mark_processed(pos, len(frame))
        return pos, len(frame)

    def read_at(self, position: int) -> WalRecord:
        """Read and CRC-verify the frame at `position`."""
        return decode_frame(self.read_frame_bytes(position))

    def read_frame_bytes(self, position: int) -> bytes:
        if position >= self.tail():
            raise OutOfRangeError(f"position {position} beyond tail")
        frag = self._fragment_for(position)
        rel = position - frag.start
        try:
            header = frag.pread(rel, FRAME_HEADER_SIZE)
        except OSError as exc:
            raise OutOfRangeError(f"fragment vanished under read at {position}") from exc
        if len(header) < FRAME_HEADER_SIZE or header == _ZERO_HEADER:
            raise OutOfRangeError(f"no frame written at {position}")
        payload_len = struct.unpack_from("<I", header, 4)[0]
        if rel + FRAME_HEADER_SIZE + payload_len > frag.size:
            raise CorruptionError("frame overruns fragment")
        try:
            rest = frag.pread(rel + FRAME_HEADER_SIZE, payload_len)
        except OSError as exc:
            raise OutOfRangeError(f"fragment vanished under read at {position}") from exc
        if len(rest) < payload_len:
            raise CorruptionError("torn frame")
        return header + rest

    def frame_value_source(self, position: int) -> tuple["WalValueSource", int]:
        """Random-access view of the value region of the frame at `position`.

        Skips CRC verification by design: callers read sub-ranges of large
        values (serialized indices) without touching the rest.
        """
        frag = self._fragment_for(position)
        rel = position - frag.start
        try:
            header = frag.pread(rel, FRAME_HEADER_SIZE)
        except OSError as exc:
            raise OutOfRangeError(f"fragment vanished under read at {position}") from exc
        if len(header) < FRAME_HEADER_SIZE or header == _ZERO_HEADER:
            raise OutOfRangeError(f"no frame written at {position}")
        payload_len, _, _, key_len = struct.unpack_from("<IBBH", header, 4)
        value_len = payload_len - key_len
        if value_len < 0 or rel + FRAME_HEADER_SIZE + payload_len > frag.size:
            raise CorruptionError("frame overruns fragment")
        base = rel + FRAME_HEADER_SIZE + key_len
        return WalValueSource(frag, base, value_len), value_len

    def mark_processed(self, position: int, record_len: int) -> None:
        self.tracker.mark(position, position + record_len)

    def last_processed(self) -> int:
        return self.tracker.last()

    def wait_processed(self, target: int, timeout: Optional[float] = None) -> bool:
        return self.tracker.wait_for(target, timeout)

    def sync(self) -> None:
        """Make all frames below the current last-processed watermark durable."""
        watermark = self.tracker.last()
        with self._frag_lock:
            frags = sorted(self._fragments.items())
        for start, frag in frags:
            if start >= watermark:
                break
            if frag.finalized:
                continue
            frag.fsync()
            if start + frag.size <= watermark:
                with frag.lock:
                    frag.finalized = frag.synced_len >= frag.written_high

    def sync_range(self, position: int, length: int) -> None:
        """Force the fragment covering [position, position+length) to disk."""
        self._fragment_for(position).fsync()

    def synced_lengths(self) -> dict[int, int]:
        """Per-fragment synced byte counts; consumed by crash-test harnesses."""
        with self._frag_lock:
            return {s: f.synced_len for s, f in self._fragments.items()}

    # ------------------------------------------------------------------
    # replay and GC

    def _iter_frames(self, position: int, decode: bool = True
                     ) -> Iterator[tuple[Optional[WalRecord], int, int]]:
        """Yield (record, position, frame_len) from `position` onward, in
        offset order, stopping at the first torn or corrupt frame (treated as
        the crash point, not an error).

        A zeroed header or a fragment that ends early is a padding gap:
        iteration jumps to the next fragment if one exists, else stops.
        """
        size = self.config.fragment_size_bytes
        with self._frag_lock:
            starts = sorted(s for s in self._fragments if s + size > position)
        pos = position
        for idx, start in enumerate(starts):
            frag = self._fragments.get(start)
            if frag is None:
                continue
            frag_end = start + size
            if pos < start:
                pos = start
            while True:
                rel = pos - start
                if frag_end - pos < FRAME_HEADER_SIZE:
                    break  # tail remainder too small for a header: padding gap
                header = frag.pread(rel, FRAME_HEADER_SIZE)
                if len(header) < FRAME_HEADER_SIZE or header == _ZERO_HEADER:
                    break  # unwritten region: gap
                crc, payload_len, _, _, _ = FRAME_HEADER.unpack(header)
                frame_len = FRAME_HEADER_SIZE + payload_len
                if pos + frame_len > frag_end:
                    return  # length overruns the fragment: crash point
                rest = frag.pread(rel + FRAME_HEADER_SIZE, payload_len)
                if len(rest) < payload_len:
                    return  # torn frame: crash point
                frame = header + rest
                if zlib.crc32(frame[4:]) != crc:
                    return  # corrupt frame: crash point
                record = decode_frame(frame) if decode else None
                yield record, pos, frame_len
                pos += frame_len

    def replay_from(self, position: int) -> Iterator[tuple[int, WalRecord]]:
        """Stream (position, record) for every decodable frame from `position`
        to the durable tail, in offset order."""
        for record, pos, _length in self._iter_frames(position, decode=True):
            assert record is not None
            yield pos, record

    def gc_before(self, position: int) -> int:
        """Delete every fragment whose whole range lies below `position`."""
        size = self.config.fragment_size_bytes
        with self._frag_lock:
            victims = [s for s in self._fragments if s + size <= position]
            frags = [self._fragments.pop(s) for s in victims]
        for frag in frags:
            frag.close()
            frag.path.unlink(missing_ok=True)
        return len(frags)


class WalValueSource:
    """Random-access reads within one frame's value region."""

    __slots__ = ("_frag", "_base", "length")

    def __init__(self, frag: _Fragment, base: int, length: int):
        self._frag = frag
        self._base = base
        self.length = length

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.length:
            raise OutOfRangeError("read outside value region")
        try:
            return self._frag.pread(self._base + offset, length)
        except OSError as exc:
            raise OutOfRangeError("fragment vanished under read") from exc

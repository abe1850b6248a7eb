"""Background machinery: index flushing, control-region snapshots, recovery.

The control region is a double-buffered file of two 64 KiB slots; a snapshot
writes the serialized region into the slot not holding the latest valid
generation, so a torn write can only destroy the older snapshot.  Each slot::

    crc(4) | payload_len(4) | payload

with payload::

    generation(8) | global_replay_from(8) | cell_count(4)
    then per cell: keyspace_id(1) | cell_key_len(2) | cell_key
                   | flushed_index_pos(8) | replay_pos(8)

All integers little-endian; the CRC matches the log frame convention.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import index_format
from .bloom import hash_key
from .errors import CorruptionError
from .failpoints import DISABLED, FailpointRegistry
from .index_format import ENTRY_SIZE, KEY_SIZE, TOMBSTONE_BIT, IndexEntry
from .large_table import (BufferEntry, Cell, CellSnapshot, CellState, FlushJob,
                          IndexUpdate, LargeTable, SnapshotMetadata)
from .metrics import Metrics, NullMetrics
from .wal import RecordKind, Wal, WalRecord

SLOT_SIZE = 64 * 1024
CONTROL_FILE_NAME = "control"
_SLOT_HEADER = struct.Struct("<II")
_REGION_HEAD = struct.Struct("<QQI")
_CELL_HEAD = struct.Struct("<BH")
_CELL_TAIL = struct.Struct("<QQ")


@dataclass(frozen=True)
class ControlRegion:
    generation: int
    global_replay_from: int
    cells: list[CellSnapshot] = field(default_factory=list)


def serialize_control(region: ControlRegion) -> bytes:
    parts = [_REGION_HEAD.pack(region.generation, region.global_replay_from,
                               len(region.cells))]
    for cell in region.cells:
        parts.append(_CELL_HEAD.pack(cell.keyspace_id, len(cell.cell_key)))
        parts.append(cell.cell_key)
        parts.append(_CELL_TAIL.pack(cell.flushed_index_pos, cell.replay_pos))
    payload = b"".join(parts)
    if len(payload) > SLOT_SIZE - _SLOT_HEADER.size:
        raise ValueError("control region exceeds one slot; too many cells")
    return payload


def deserialize_control(payload: bytes) -> ControlRegion:
    generation, replay_from, count = _REGION_HEAD.unpack_from(payload)
    offset = _REGION_HEAD.size
    cells = []
    for _ in range(count):
        keyspace_id, key_len = _CELL_HEAD.unpack_from(payload, offset)
        offset += _CELL_HEAD.size
        cell_key = payload[offset:offset + key_len]
        offset += key_len
        index_pos, replay_pos = _CELL_TAIL.unpack_from(payload, offset)
        offset += _CELL_TAIL.size
        cells.append(CellSnapshot(keyspace_id, cell_key, index_pos, replay_pos))
    return ControlRegion(generation, replay_from, cells)


class ControlFile:
    """The two-slot snapshot file; the valid slot with the highest generation
    is authoritative."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        exists = self.path.exists()
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        if not exists:
            os.ftruncate(self._fd, 2 * SLOT_SIZE)

    def read_slots(self) -> list[Optional[ControlRegion]]:
        regions: list[Optional[ControlRegion]] = []
        for slot in range(2):
            raw = os.pread(self._fd, SLOT_SIZE, slot * SLOT_SIZE)
            region = None
            if len(raw) >= _SLOT_HEADER.size:
                crc, length = _SLOT_HEADER.unpack_from(raw)
                if 0 < length <= SLOT_SIZE - _SLOT_HEADER.size:
                    payload = raw[_SLOT_HEADER.size:_SLOT_HEADER.size + length]
                    if len(payload) == length and zlib.crc32(payload) == crc:
                        try:
                            region = deserialize_control(payload)
                        except (struct.error, IndexError):
                            region = None
            regions.append(region)
        return regions

    def read_best(self) -> Optional[ControlRegion]:
        candidates = [r for r in self.read_slots() if r is not None]
        if not candidates:
            return None
        return max(candidates, key=lambda r: r.generation)

    def write(self, region: ControlRegion) -> None:
        payload = serialize_control(region)
        slot = region.generation % 2
        blob = _SLOT_HEADER.pack(zlib.crc32(payload), len(payload)) + payload
        os.pwrite(self._fd, blob, slot * SLOT_SIZE)

    def sync(self) -> None:
        os.fsync(self._fd)

    def close(self) -> None:
        try:
            os.close(self._fd)
        except OSError:
            pass


def index_frame_key(cell: Cell) -> bytes:
    return bytes([cell.keyspace_id]) + cell.cell_key


class Maintenance:
    """Flush and snapshot engine shared by the public handle, the background
    loops, and the relocator."""

    def __init__(self, table: LargeTable, value_wal: Wal, index_wal: Wal,
                 control: ControlFile, generation: int = 0,
                 gc_watermark: Callable[[], int] = lambda: 0,
                 metrics: Optional[Metrics] = None,
                 failpoints: FailpointRegistry = DISABLED):
        self.table = table
        self.value_wal = value_wal
        self.index_wal = index_wal
        self.control = control
        self.metrics = metrics or NullMetrics()
        self.fp = failpoints
        self.gc_watermark = gc_watermark
        self._generation = generation
        self._snapshot_lock = threading.Lock()
        # Smallest index position referenced by each on-disk slot; bounds
        # index-store GC so a fallback slot never points at deleted frames.
        self._slot_min_index: list[Optional[int]] = [None, None]

    # ------------------------------------------------------------------
    # flushing

    def run_flush(self, cell: Cell) -> Optional[int]:
        """Persist a dirty cell's index; returns the new index position, or
        None when the cell was clean, already claimed, or memory-only."""
        if not self.table.try_claim_flush(cell):
            return None
        try:
            return self._run_flush_claimed(cell)
        finally:
            self.table.release_flush_claim(cell)

    def _run_flush_claimed(self, cell: Cell) -> Optional[int]:
        watermark = self.value_wal.last_processed()
        job = self.table.begin_flush(cell, watermark)
        if job is None:
            return None
        self.fp.hit("flush.after_begin")
        if any(len(key) != KEY_SIZE for key in job.entries):
            # Persistent indices carry 32-byte keys only; other keys stay in
            # the buffer and survive through log replay instead.
            return None
        gc_mark = self.gc_watermark()
        absorbed: Optional[list[tuple[int, int]]] = None
        if job.state_at_begin is CellState.DIRTY_LOADED:
            merged = _emit_entries(sorted(job.entries.items()), gc_mark)
        else:
            old_entries: list[IndexEntry] = []
            if job.prior_index_pos is not None:
                old_entries = self.load_index(job.prior_index_pos)
            if not cell.bloom_authoritative:
                absorbed = [hash_key(entry.key) for entry in old_entries]
            merged = _merge_flush(old_entries, job.entries, gc_mark)
        payload = index_format.serialize_flat(merged)
        record = WalRecord(RecordKind.PUT, cell.keyspace_id,
                           index_frame_key(cell), payload)
        self.fp.hit("flush.before_append")
        position, length = self.index_wal.append(record, mark=True)
        self.metrics.incr("wal_bytes_written", length)
        self.fp.hit("flush.after_append")
        self.table.complete_flush(cell, job, position, absorbed)
        self.fp.hit("flush.after_complete")
        return position

    def flush_dirty(self, minimum: Optional[int] = None) -> int:
        """Flush every dirty unclaimed cell meeting the threshold; returns the
        number of cells flushed."""
        flushed = 0
        for cell in self.table.dirty_cells(minimum):
            if self.run_flush(cell) is not None:
                flushed += 1
        return flushed

    def load_index(self, index_pos: int) -> list[IndexEntry]:
        source, value_len = self.index_wal.frame_value_source(index_pos)
        return index_format.load_all(source, value_len // ENTRY_SIZE)

    def probe_index(self, index_pos: int, key: bytes,
                    window: Optional[index_format.WindowConfig] = None
                    ) -> Optional[int]:
        source, value_len = self.index_wal.frame_value_source(index_pos)
        outcome = index_format.optimistic_lookup(
            source, value_len // ENTRY_SIZE, key,
            window or index_format.WindowConfig())
        self.metrics.incr("index_store_reads", outcome.iterations)
        self.metrics.record_iterations(outcome.iterations)
        return outcome.position

    # ------------------------------------------------------------------
    # snapshots

    def write_snapshot(self) -> int:
        """Flush nothing, sync both logs, and persist the control region.

        Returns the new generation.  Readers of the control file always find
        at least one valid slot because slots alternate.
        """
        with self._snapshot_lock:
            meta = self.table.snapshot_metadata(default_tail=self.value_wal.tail())
            self.fp.hit("snapshot.after_meta")
            self.value_wal.sync()
            self.fp.hit("snapshot.after_value_sync")
            self.index_wal.sync()
            self.fp.hit("snapshot.after_index_sync")
            generation = self._generation + 1
            region = ControlRegion(generation, meta.global_replay_from, meta.cells)
            self.control.write(region)
            self.fp.hit("snapshot.after_slot_write")
            self.control.sync()
            self.fp.hit("snapshot.after_control_sync")
            self._generation = generation
            mins = [c.flushed_index_pos for c in meta.cells]
            self._slot_min_index[generation % 2] = min(mins) if mins else None
            return generation

    def generation(self) -> int:
        return self._generation

    def seed_slot_minimums(self, slots: list[Optional[ControlRegion]]) -> None:
        for index, region in enumerate(slots):
            if region is None or not region.cells:
                self._slot_min_index[index] = None
            else:
                self._slot_min_index[index] = min(
                    c.flushed_index_pos for c in region.cells)

    def gc_index_store(self) -> int:
        """Reclaim index-store fragments below every live reference: current
        cell pointers plus both on-disk snapshot slots."""
        candidates = [self.table.min_flushed_index_pos(),
                      self._slot_min_index[0], self._slot_min_index[1]]
        live = [c for c in candidates if c is not None]
        if not live:
            return 0
        return self.index_wal.gc_before(min(live))


def _emit(key: bytes, position: int, tombstone: bool, gc_mark: int,
          out: list[IndexEntry]) -> None:
    if tombstone:
        if position < gc_mark:
            return  # masked history is reclaimed; the deletion is final
        out.append(IndexEntry(key, position | TOMBSTONE_BIT))
    else:
        out.append(IndexEntry(key, position))


def _emit_entries(items: list[tuple[bytes, BufferEntry]], gc_mark: int
                  ) -> list[IndexEntry]:
    out: list[IndexEntry] = []
    for key, entry in items:
        _emit(key, entry.position, entry.tombstone, gc_mark, out)
    return out


def _merge_flush(old: list[IndexEntry], snapshot: dict[bytes, BufferEntry],
                 gc_mark: int) -> list[IndexEntry]:
    """Two-way merge of the previous on-disk index with a flush snapshot;
    snapshot entries win per key, tombstones below the GC watermark drop."""
    fresh = sorted(snapshot.items())
    out: list[IndexEntry] = []
    i = j = 0
    while i < len(old) or j < len(fresh):
        if j >= len(fresh):
            entry = old[i]
            _emit(entry.key, entry.wal_position(), entry.is_tombstone(), gc_mark, out)
            i += 1
        elif i >= len(old) or fresh[j][0] < old[i].key:
            key, buf = fresh[j]
            _emit(key, buf.position, buf.tombstone, gc_mark, out)
            j += 1
        elif old[i].key < fresh[j][0]:
            entry = old[i]
            _emit(entry.key, entry.wal_position(), entry.is_tombstone(), gc_mark, out)
            i += 1
        else:  # same key: the buffered write supersedes the flushed one
            key, buf = fresh[j]
            _emit(key, buf.position, buf.tombstone, gc_mark, out)
            i += 1
            j += 1
    return out


# ----------------------------------------------------------------------
# recovery

@dataclass
class RecoveredEngine:
    table: LargeTable
    value_wal: Wal
    index_wal: Wal
    control: ControlFile
    generation: int
    control_slots: list[Optional[ControlRegion]]
    replay_start: int
    replayed_frames: int


def recover(directory: str | os.PathLike, keyspaces, value_config=None,
            index_config=None) -> RecoveredEngine:
    """Rebuild a ready engine from a database directory.

    Chooses the authoritative control region (zero-state when both slots are
    invalid), restores flushed cells as Unloaded pointers, then replays the
    value log from the recorded global replay-from position.  Batch markers
    consume their declared count of member frames atomically: a batch with
    fewer surviving frames than declared is discarded wholesale.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    control = ControlFile(directory / CONTROL_FILE_NAME)
    slots = control.read_slots()
    candidates = [r for r in slots if r is not None]
    region = max(candidates, key=lambda r: r.generation) if candidates else None
    value_wal = Wal(directory / "value-wal", value_config)
    index_wal = Wal(directory / "index-wal", index_config)
    table = LargeTable(keyspaces)
    if region is not None:
        known = set(table.keyspace_ids())
        for cell_snap in region.cells:
            if cell_snap.keyspace_id not in known:
                raise CorruptionError(
                    f"snapshot references unknown keyspace {cell_snap.keyspace_id}")
            table.restore_cell(cell_snap.keyspace_id, cell_snap.cell_key,
                               cell_snap.flushed_index_pos, cell_snap.replay_pos)
        replay_start = min(region.global_replay_from, value_wal.tail())
        generation = region.generation
    else:
        replay_start = 0
        generation = 0
    replayed = _replay_into_table(value_wal, table, replay_start)
    return RecoveredEngine(table=table, value_wal=value_wal, index_wal=index_wal,
                           control=control, generation=generation,
                           control_slots=slots, replay_start=replay_start,
                           replayed_frames=replayed)


def _replay_into_table(value_wal: Wal, table: LargeTable, replay_start: int) -> int:
    applied = 0
    stream = value_wal.replay_from(replay_start)
    for position, record in stream:
        if record.kind is RecordKind.BATCH_START:
            members = []
            expected = record.batch_count()
            for _ in range(expected):
                item = next(stream, None)
                if item is None:
                    break
                members.append(item)
            if len(members) < expected:
                break  # torn batch at the crash point: discard wholesale
            for member_pos, member in members:
                _apply_replayed(table, member, member_pos, pin=position)
                applied += 1
        else:
            _apply_replayed(table, record, position, pin=position)
            applied += 1
    return applied


def _apply_replayed(table: LargeTable, record: WalRecord, position: int,
                    pin: int) -> None:
    if record.kind is RecordKind.PUT:
        table.apply(IndexUpdate(record.keyspace_id, record.key, position, False),
                    replay_pin=pin)
    elif record.kind is RecordKind.TOMBSTONE:
        table.apply(IndexUpdate(record.keyspace_id, record.key, position, True),
                    replay_pin=pin)


# ----------------------------------------------------------------------
# background agents

class AgentLoop(threading.Thread):
    def __init__(self, name: str, interval: float, body: Callable[[], None]):
        super().__init__(name=name, daemon=True)
        self._interval = interval
        self._body = body
        self._stop_event = threading.Event()

    def run(self) -> None:
        while not self._stop_event.wait(self._interval):
            try:
                self._body()
            except Exception:  # pragma: no cover - agents must not die silently
                import logging
                logging.getLogger(__name__).exception("background agent failed")
                raise

    def stop(self) -> None:
        self._stop_event.set()
        if self.is_alive():
            self.join()


class SnapshotLoop(AgentLoop):
    def __init__(self, maintenance: Maintenance, interval: float):
        def body():
            maintenance.write_snapshot()
            maintenance.gc_index_store()
        super().__init__("walstore-snapshot", interval, body)


class SyncLoop(AgentLoop):
    def __init__(self, value_wal: Wal, index_wal: Wal, interval: float):
        def body():
            value_wal.sync()
            index_wal.sync()
        super().__init__("walstore-sync", interval, body)


class FlusherPool:
    """Pool of flusher workers persisting cells past their dirty threshold,
    largest buffer first; cell claims keep workers off each other's cells."""

    def __init__(self, maintenance: Maintenance, workers: int,
                 interval: float = 0.05):
        self._threads = [
            AgentLoop(f"walstore-flusher-{i}", interval, self._scan)
            for i in range(workers)
        ]
        self._maintenance = maintenance

    def _scan(self) -> None:
        for cell in self._maintenance.table.dirty_cells():
            self._maintenance.run_flush(cell)

    def start(self) -> None:
        for thread in self._threads:
            thread.start()

    def stop(self) -> None:
        for thread in self._threads:
            thread.stop()

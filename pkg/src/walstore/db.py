"""The embedded engine handle: open/recover, reads, writes, batches,
durability control, relocation triggers, metrics.

Write path: allocate a frame in the value log, write it, apply the index
update, mark the range processed.  Read path: value cache, then the sharded
table (bloom reject / buffer hit / resident miss), then an optimistic probe
of the cell's flushed index, then one value-log read.
"""

from __future__ import annotations

import fcntl
import os
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .errors import (CorruptionError, LockError, LogClosedError,
                     OutOfRangeError)
from .failpoints import DISABLED, FailpointRegistry
from .index_format import TOMBSTONE_BIT, WindowConfig
from .large_table import IndexUpdate, KeySpaceConfig, LargeTable, LookupKind
from .maintenance import (AgentLoop, FlusherPool, Maintenance, SyncLoop,
                          recover)
from .metrics import Metrics, MetricsSnapshot
from .relocation import (RelocationConfig, RelocationResult, Relocator,
                         RelocationStrategy)
from .wal import (RecordKind, Wal, WalConfig, WalRecord, encode_record)

LOCK_FILE_NAME = "lock"


class Durability(Enum):
    #: Writes return once resident in the OS write-back cache.
    ACKNOWLEDGED = "acknowledged"
    #: Writes return only after the covering fragment is fsynced.
    SYNCED = "synced"


@dataclass
class DbConfig:
    directory: str | os.PathLike
    key_spaces: list[KeySpaceConfig]
    value_wal: WalConfig = field(default_factory=WalConfig)
    index_wal: WalConfig = field(default_factory=WalConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    cache_capacity_bytes: int = 256 * 1024 * 1024
    flusher_workers: int = 2
    snapshot_interval: Optional[float] = 5.0
    sync_interval: Optional[float] = 0.5
    relocation: RelocationConfig = field(default_factory=RelocationConfig)
    durability: Durability = Durability.ACKNOWLEDGED
    loaded_cell_entry_budget: int = 1_000_000
    auto_relocate: bool = False
    auto_relocate_dead_fraction: float = 0.30
    start_background: bool = True

    def __post_init__(self) -> None:
        if not self.key_spaces:
            raise ValueError("at least one key space is required")


class WriteBatch:
    """Ordered updates applied atomically; later entries win within the batch."""

    def __init__(self) -> None:
        self.items: list[tuple[int, bytes, Optional[bytes]]] = []

    def put(self, keyspace_id: int, key: bytes, value: bytes) -> "WriteBatch":
        self.items.append((keyspace_id, key, value))
        return self

    def delete(self, keyspace_id: int, key: bytes) -> "WriteBatch":
        self.items.append((keyspace_id, key, None))
        return self

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class RecoveryInfo:
    replay_start: int
    replayed_frames: int


class _ValueCache:
    """Byte-bounded LRU keyed by (keyspace_id, key).

    Entries carry the log position that produced them, so a racing stale
    insert can never shadow a newer write; deletions store a None value at
    their tombstone's position.
    """

    def __init__(self, capacity_bytes: int):
        self.capacity = capacity_bytes
        self._lock = threading.Lock()
        self._entries: OrderedDict[tuple[int, bytes], tuple[int, Optional[bytes]]] = \
            OrderedDict()
        self._bytes = 0

    @property
    def enabled(self) -> bool:
        return self.capacity > 0

    @staticmethod
    def _weight(key: tuple[int, bytes], value: Optional[bytes]) -> int:
        return len(key[1]) + (len(value) if value is not None else 0) + 64

    def get(self, key: tuple[int, bytes]) -> tuple[bool, Optional[bytes]]:
        """(hit, value); a cached deletion is a hit carrying None."""
        if not self.enabled:
            return False, None
        with self._lock:
            item = self._entries.get(key)
            if item is None:
                return False, None
            self._entries.move_to_end(key)
            return True, item[1]

    def note(self, key: tuple[int, bytes], position: int,
             value: Optional[bytes]) -> None:
        if not self.enabled:
            return
        with self._lock:
            current = self._entries.get(key)
            if current is not None:
                if current[0] >= position:
                    return
                self._bytes -= self._weight(key, current[1])
                del self._entries[key]
            weight = self._weight(key, value)
            if weight > self.capacity:
                return
            self._entries[key] = (position, value)
            self._bytes += weight
            while self._bytes > self.capacity and self._entries:
                evicted_key, (_, evicted_value) = self._entries.popitem(last=False)
                self._bytes -= self._weight(evicted_key, evicted_value)


class Db:
    """Engine handle, shareable across threads; all operations are callable
    concurrently.  Obtain via :func:`open`."""

    def __init__(self, config: DbConfig,
                 failpoints: FailpointRegistry = DISABLED):
        self.config = config
        self.fp = failpoints
        directory = Path(config.directory)
        directory.mkdir(parents=True, exist_ok=True)
        self._lock_fd = self._acquire_lock(directory / LOCK_FILE_NAME)
        try:
            recovered = recover(directory, config.key_spaces,
                                config.value_wal, config.index_wal)
        except BaseException:
            os.close(self._lock_fd)
            raise
        self.table: LargeTable = recovered.table
        self.value_wal: Wal = recovered.value_wal
        self.index_wal: Wal = recovered.index_wal
        self.metrics = Metrics()
        self.maintenance = Maintenance(
            self.table, self.value_wal, self.index_wal, recovered.control,
            generation=recovered.generation, metrics=self.metrics,
            failpoints=failpoints)
        self.maintenance.seed_slot_minimums(recovered.control_slots)
        self._cache = _ValueCache(config.cache_capacity_bytes)
        self.relocator = Relocator(
            self.table, self.value_wal, self.maintenance, self.metrics,
            failpoints,
            applied_hook=lambda ks, key, pos, value:
                self._cache.note((ks, key), pos, value))
        self.maintenance.gc_watermark = self.relocator.min_required_position
        self.table.index_loader = self.maintenance.load_index
        self.table.index_prober = self._probe
        self.recovery_info = RecoveryInfo(recovered.replay_start,
                                          recovered.replayed_frames)
        self._dead_bytes_estimate = 0
        self._op_cond = threading.Condition()
        self._active_ops = 0
        self._closing = False
        self._agents: list = []
        if config.start_background:
            self._start_agents()

    # ------------------------------------------------------------------
    # lifecycle

    @staticmethod
    def _acquire_lock(path: Path) -> int:
        fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            os.close(fd)
            raise LockError(f"database at {path.parent} is already open") from exc
        return fd

    def _start_agents(self) -> None:
        config = self.config
        if config.flusher_workers > 0:
            pool = FlusherPool(self.maintenance, config.flusher_workers)
            pool.start()
            self._agents.append(pool)
        if config.snapshot_interval is not None:
            loop = AgentLoop("walstore-snapshot", config.snapshot_interval,
                             self._snapshot_round)
            loop.start()
            self._agents.append(loop)
        if config.sync_interval is not None:
            loop = SyncLoop(self.value_wal, self.index_wal, config.sync_interval)
            loop.start()
            self._agents.append(loop)
        if config.auto_relocate:
            loop = AgentLoop("walstore-relocator", 1.0, self._auto_relocate_check)
            loop.start()
            self._agents.append(loop)

    def _snapshot_round(self) -> None:
        self.maintenance.write_snapshot()
        self.maintenance.gc_index_store()
        self.table.evict_loaded_cells(self.config.loaded_cell_entry_budget)

    def _auto_relocate_check(self) -> None:
        disk = self.value_wal.disk_bytes()
        if disk <= 0:
            return
        if self._dead_bytes_estimate / disk < self.config.auto_relocate_dead_fraction:
            return
        try:
            self.trigger_relocation()
            self._dead_bytes_estimate = 0
        except Exception:
            pass

    @contextmanager
    def _op(self):
        with self._op_cond:
            if self._closing:
                raise LogClosedError("engine is closed")
            self._active_ops += 1
        try:
            yield
        finally:
            with self._op_cond:
                self._active_ops -= 1
                self._op_cond.notify_all()

    def close(self) -> None:
        """Drain in-flight work, flush, snapshot, sync, release the lock."""
        with self._op_cond:
            if self._closing:
                return
            self._closing = True
            self._op_cond.wait_for(lambda: self._active_ops == 0)
        for agent in self._agents:
            agent.stop()
        self.maintenance.flush_dirty(minimum=1)
        self.maintenance.write_snapshot()
        self.value_wal.close()
        self.index_wal.close()
        self.maintenance.control.close()
        os.close(self._lock_fd)

    def abort_for_test(self) -> None:
        """Abandon the engine as a killed process would: no flush, no
        snapshot, no sync; file handles and the lock simply drop."""
        with self._op_cond:
            self._closing = True
        for agent in self._agents:
            agent.stop()
        self.value_wal.close()
        self.index_wal.close()
        self.maintenance.control.close()
        os.close(self._lock_fd)

    # ------------------------------------------------------------------
    # writes

    def put(self, keyspace_id: int, key: bytes, value: bytes) -> None:
        with self._op():
            self._write_one(keyspace_id, key, value, tombstone=False)

    def delete(self, keyspace_id: int, key: bytes) -> None:
        with self._op():
            self._write_one(keyspace_id, key, b"", tombstone=True)

    def _write_one(self, keyspace_id: int, key: bytes, value: bytes,
                   tombstone: bool) -> None:
        self.table.locate_cell(keyspace_id, key)  # validates keyspace and key shape
        if tombstone:
            record = WalRecord.tombstone(keyspace_id, key)
        else:
            record = WalRecord.put(keyspace_id, key, value)
        frame = encode_record(record)
        self.fp.hit("write.before_alloc")
        position = self.value_wal.allocate(len(frame))
        self.fp.hit("write.after_alloc")
        self.value_wal.write_at(position, record, frame)
        self.fp.hit("write.after_wal_write")
        replaced = self.table.apply(
            IndexUpdate(keyspace_id, key, position, tombstone))
        self.fp.hit("write.after_apply")
        self.value_wal.mark_processed(position, len(frame))
        self.fp.hit("write.after_mark")
        self.metrics.incr("wal_bytes_written", len(frame))
        self.metrics.incr("logical_bytes_ingested", len(key) + len(value))
        if tombstone or not replaced:
            self._dead_bytes_estimate += len(frame)
        if self.config.durability is Durability.SYNCED:
            self.value_wal.sync_range(position, len(frame))
        self._cache.note((keyspace_id, key), position,
                         None if tombstone else value)

    def write_batch(self, batch: WriteBatch) -> None:
        """Apply all updates in `batch` as one atomic unit.

        The batch shares a single contiguous allocation (batch-start marker
        plus member frames), so recovery sees it all-or-nothing.
        """
        with self._op():
            items = batch.items
            if not items:
                raise ValueError("empty batch")
            records = [WalRecord.batch_start(len(items))]
            for keyspace_id, key, value in items:
                self.table.locate_cell(keyspace_id, key)
                if value is None:
                    records.append(WalRecord.tombstone(keyspace_id, key))
                else:
                    records.append(WalRecord.put(keyspace_id, key, value))
            frames = [encode_record(r) for r in records]
            total = sum(len(f) for f in frames)
            if total > self.config.value_wal.fragment_size_bytes:
                raise ValueError("batch larger than one fragment")
            self.fp.hit("batch.before_alloc")
            base = self.value_wal.allocate(total)
            self.fp.hit("batch.after_alloc")
            offset = base
            positions = []
            for record, frame in zip(records, frames):
                self.value_wal.write_at(offset, record, frame)
                positions.append(offset)
                offset += len(frame)
                self.fp.hit("batch.frame_written")
            self.fp.hit("batch.after_wal_write")
            for (keyspace_id, key, value), record, position in zip(
                    items, records[1:], positions[1:]):
                self.table.apply(
                    IndexUpdate(keyspace_id, key, position, value is None),
                    replay_pin=base)
                self.fp.hit("batch.member_applied")
            self.fp.hit("batch.after_applies")
            self.value_wal.mark_processed(base, total)
            self.fp.hit("batch.after_mark")
            self.metrics.incr("wal_bytes_written", total)
            logical = sum(len(k) + (len(v) if v is not None else 0)
                          for _, k, v in items)
            self.metrics.incr("logical_bytes_ingested", logical)
            if self.config.durability is Durability.SYNCED:
                self.value_wal.sync_range(base, total)
            for (keyspace_id, key, value), position in zip(items, positions[1:]):
                self._cache.note((keyspace_id, key), position, value)

    # ------------------------------------------------------------------
    # reads

    def _probe(self, index_pos: int, key: bytes) -> Optional[int]:
        return self.maintenance.probe_index(index_pos, key, self.config.window)

    def get(self, keyspace_id: int, key: bytes) -> Optional[bytes]:
        with self._op():
            cache_key = (keyspace_id, key)
            hit, value = self._cache.get(cache_key)
            if hit:
                self.metrics.incr("cache_hits")
                return value
            if self._cache.enabled:
                self.metrics.incr("cache_misses")
            for _ in range(4):
                try:
                    return self._get_uncached(keyspace_id, key, cache_key)
                except OutOfRangeError:
                    continue  # raced relocation GC; the index has moved on
            raise CorruptionError("lookup kept racing garbage collection")

    def _get_uncached(self, keyspace_id: int, key: bytes,
                      cache_key: tuple[int, bytes]) -> Optional[bytes]:
        outcome = self.table.lookup(keyspace_id, key)
        if outcome.bloom_rejected:
            self.metrics.incr("bloom_negative_hits")
            return None
        if outcome.kind is LookupKind.ABSENT or outcome.kind is LookupKind.TOMBSTONED:
            return None
        if outcome.kind is LookupKind.FOUND:
            value = self._read_value(keyspace_id, key, outcome.position)
            self._cache.note(cache_key, outcome.position, value)
            return value
        raw = self._probe(outcome.index_pos, key)
        if raw is None or raw & TOMBSTONE_BIT:
            return None
        self.table.note_disk_key(keyspace_id, key)
        value = self._read_value(keyspace_id, key, raw)
        self._cache.note(cache_key, raw, value)
        return value

    def _read_value(self, keyspace_id: int, key: bytes, position: int) -> bytes:
        record = self.value_wal.read_at(position)
        self.metrics.incr("value_wal_reads")
        if record.kind is not RecordKind.PUT or record.key != key \
                or record.keyspace_id != keyspace_id:
            raise CorruptionError("value frame does not match the queried key")
        return record.value

    def exists(self, keyspace_id: int, key: bytes) -> bool:
        """Existence check resolved entirely from the index: never reads the
        value log and never touches the value cache."""
        with self._op():
            for _ in range(4):
                try:
                    return self._exists_once(keyspace_id, key)
                except OutOfRangeError:
                    continue
            raise CorruptionError("lookup kept racing garbage collection")

    def _exists_once(self, keyspace_id: int, key: bytes) -> bool:
        outcome = self.table.lookup(keyspace_id, key)
        if outcome.bloom_rejected:
            self.metrics.incr("bloom_negative_hits")
            return False
        if outcome.kind is LookupKind.FOUND:
            return True
        if outcome.kind is LookupKind.ABSENT or outcome.kind is LookupKind.TOMBSTONED:
            return False
        raw = self._probe(outcome.index_pos, key)
        if raw is None or raw & TOMBSTONE_BIT:
            return False
        self.table.note_disk_key(keyspace_id, key)
        return True

    def less_than(self, keyspace_id: int, key: bytes
                  ) -> Optional[tuple[bytes, bytes]]:
        """Largest live key strictly smaller than `key`, with its value."""
        with self._op():
            for _ in range(4):
                found = self.table.prev_entry(keyspace_id, key)
                if found is None:
                    return None
                prev_key, position = found
                try:
                    return prev_key, self._read_value(keyspace_id, prev_key, position)
                except OutOfRangeError:
                    continue
            raise CorruptionError("lookup kept racing garbage collection")

    # ------------------------------------------------------------------
    # durability, maintenance, introspection

    def flush_durability(self) -> None:
        """Return only after every previously acknowledged write is durable
        against OS crash (both logs synced)."""
        with self._op():
            target = self.value_wal.tail()
            if not self.value_wal.wait_processed(target, timeout=60.0):
                raise TimeoutError("in-flight writes did not settle")
            self.value_wal.sync()
            self.index_wal.sync()
            self.fp.hit("flush_durability.after_sync")

    def trigger_relocation(self, config: Optional[RelocationConfig] = None
                           ) -> RelocationResult:
        """Run one synchronous relocation pass; raises RelocationBusyError
        while another pass is active."""
        with self._op():
            return self.relocator.relocate(config or self.config.relocation)

    def snapshot_now(self) -> int:
        """Force one control-region snapshot; returns its generation."""
        with self._op():
            return self.maintenance.write_snapshot()

    def flush_cells(self, minimum: Optional[int] = None) -> int:
        """Flush dirty cells now (threshold override in `minimum`)."""
        with self._op():
            return self.maintenance.flush_dirty(minimum)

    def metrics_snapshot(self) -> MetricsSnapshot:
        return self.metrics.snapshot()

    def synced_lengths(self) -> dict[str, dict[int, int]]:
        """Per-log fragment sync watermarks; consumed by crash harnesses."""
        return {"value": self.value_wal.synced_lengths(),
                "index": self.index_wal.synced_lengths()}


def open(config: DbConfig, failpoints: FailpointRegistry = DISABLED) -> Db:
    """Open (creating or recovering) the database at config.directory."""
    return Db(config, failpoints)

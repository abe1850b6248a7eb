"""Space reclamation: rewrite live entries at the log tail, drop dead ones,
then delete whole fragments below the watermark.

A pass never blocks writers.  Correctness under concurrency rests on a
compare-and-set rule: before rewriting an entry observed at position P, the
relocator captures L, the highest contiguous log position whose writes are
both stored and indexed; the index update is applied only while the key's
effective position is still below L, so any concurrent write (which lands
above L) always wins.

Crash safety inside a pass follows a fixed order: scan and relocate, advance
the watermark, flush every dirty cell (purging index references below the
watermark, including carried tombstones), write a snapshot, and only then
delete fragments.  A crash at any point leaves either the old state fully
replayable or the new state fully referenced.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .errors import RelocationBusyError
from .failpoints import DISABLED, FailpointRegistry
from .large_table import IndexUpdate, LargeTable
from .maintenance import Maintenance
from .metrics import Metrics, NullMetrics
from .wal import RecordKind, Wal, WalRecord, encode_record


class RelocationDecision(Enum):
    KEEP = "keep"
    REMOVE = "remove"
    STOP = "stop"


class RelocationStrategy(Enum):
    WAL_BASED = "wal"
    INDEX_BASED = "index"


#: filter(key, value, position) -> RelocationDecision
RelocationFilter = Callable[[bytes, bytes, int], RelocationDecision]


@dataclass(frozen=True)
class RelocationConfig:
    strategy: RelocationStrategy = RelocationStrategy.WAL_BASED
    cutoff: Optional[int] = None  # None: everything processed at pass start
    filter: Optional[RelocationFilter] = None


@dataclass(frozen=True)
class RelocationResult:
    relocated: int
    skipped: int
    watermark: int
    fragments_deleted: int
    stopped: bool = False


class Relocator:
    """Single background agent owning the GC watermark of the value log."""

    def __init__(self, table: LargeTable, value_wal: Wal,
                 maintenance: Maintenance, metrics: Optional[Metrics] = None,
                 failpoints: FailpointRegistry = DISABLED,
                 applied_hook: Optional[Callable[[int, bytes, int, Optional[bytes]], None]] = None):
        self.table = table
        self.value_wal = value_wal
        self.maintenance = maintenance
        self.metrics = metrics or NullMetrics()
        self.fp = failpoints
        #: Called after each CAS-applied rewrite so the engine can keep its
        #: value cache coherent: (keyspace_id, key, new_position, value|None).
        self.applied_hook = applied_hook
        self._pass_lock = threading.Lock()
        # The public watermark is spec'd (gc never runs above it); the scan
        # cursor additionally stays frame-aligned so passes can resume.
        self._watermark = value_wal.min_position()
        self._scan_start = self._watermark

    def min_required_position(self) -> int:
        return self._watermark

    def relocate(self, config: RelocationConfig) -> RelocationResult:
        if not self._pass_lock.acquire(blocking=False):
            raise RelocationBusyError("a relocation pass is already running")
        try:
            if config.strategy is RelocationStrategy.WAL_BASED:
                return self._relocate_wal_based(config)
            return self._relocate_index_based(config)
        finally:
            self._pass_lock.release()

    # ------------------------------------------------------------------

    def _resolve_cutoff(self, config: RelocationConfig) -> int:
        processed = self.value_wal.last_processed()
        cutoff = processed if config.cutoff is None else config.cutoff
        if cutoff > processed:
            raise ValueError("cutoff must not exceed the last-processed position")
        return max(cutoff, self._watermark)

    def _relocate_wal_based(self, config: RelocationConfig) -> RelocationResult:
        cutoff = self._resolve_cutoff(config)
        relocated = skipped = 0
        stop_pos: Optional[int] = None
        next_unscanned = cutoff
        for position, record in self.value_wal.replay_from(self._scan_start):
            if position >= cutoff:
                next_unscanned = position
                break
            if record.kind is RecordKind.BATCH_START:
                continue  # members are scanned individually; the marker is inert
            self.fp.hit("relocation.at_frame")
            outcome = self._process_candidate(record, position, config)
            if outcome is None:
                stop_pos = position
                break
            relocated += outcome
            skipped += 1 - outcome
        return self._finish_pass(cutoff, relocated, skipped, stop_pos,
                                 next_unscanned)

    def _process_candidate(self, record: WalRecord, position: int,
                           config: RelocationConfig) -> Optional[int]:
        """Handle one scanned frame; returns 1 if relocated, 0 if dropped or
        dead, None when the filter stops the pass."""
        keyspace_id, key = record.keyspace_id, record.key
        # L is captured per candidate, before the liveness check: any write
        # still in flight here has an unprocessed (hence >= L) position, so
        # the CAS below can never overwrite it.
        captured = self.value_wal.last_processed()
        effective = self.table.effective_entry(keyspace_id, key)
        if record.kind is RecordKind.TOMBSTONE:
            # A still-effective tombstone needs no rewrite: once the watermark
            # passes it, the next flush merge drops it from the index, and the
            # masked history dies with the fragments below.
            return 0
        if effective is None or effective[1] or effective[0] != position:
            return 0  # overwritten or deleted: dead frame
        decision = RelocationDecision.KEEP
        if config.filter is not None:
            decision = config.filter(key, record.value, position)
            if decision is RelocationDecision.STOP:
                return None
        if decision is RelocationDecision.REMOVE:
            replacement = WalRecord.tombstone(keyspace_id, key)
            update_tombstone = True
        else:
            replacement = WalRecord(RecordKind.PUT, keyspace_id, key, record.value)
            update_tombstone = False
        frame = encode_record(replacement)
        new_pos = self.value_wal.allocate(len(frame))
        self.value_wal.write_at(new_pos, replacement, frame)
        self.fp.hit("relocation.after_rewrite")
        applied = self.table.apply_relocated(
            IndexUpdate(keyspace_id, key, new_pos, update_tombstone),
            old_position=position, last_processed=captured)
        self.value_wal.mark_processed(new_pos, len(frame))
        self.fp.hit("relocation.after_cas")
        self.metrics.incr("wal_bytes_written", len(frame))
        if applied:
            if self.applied_hook is not None:
                self.applied_hook(keyspace_id, key, new_pos,
                                  None if update_tombstone else record.value)
            if decision is RelocationDecision.KEEP:
                self.metrics.incr("relocated_entries")
                return 1
        return 0

    def _relocate_index_based(self, config: RelocationConfig) -> RelocationResult:
        cutoff = self._resolve_cutoff(config)
        relocated = skipped = 0
        stopped = False
        for cell in self.table.iter_cells():
            view = self.table.merged_view(cell)
            stale = sorted((position, key, tombstone)
                           for key, (position, tombstone) in view.items()
                           if position < cutoff)
            for position, key, tombstone in stale:
                if tombstone:
                    skipped += 1  # purged by the flush merge below
                    continue
                self.fp.hit("relocation.at_frame")
                try:
                    record = self.value_wal.read_at(position)
                except Exception:
                    skipped += 1  # raced a newer write; CAS would reject anyway
                    continue
                self.metrics.incr("value_wal_reads")
                if record.key != key:
                    skipped += 1
                    continue
                outcome = self._process_candidate(record, position, config)
                if outcome is None:
                    stopped = True
                    break
                relocated += outcome
                skipped += 1 - outcome
            if stopped:
                break
        if stopped:
            # Index order is not fragment order, so a stop yields no
            # fully-scanned-fragment guarantee; the watermark holds still.
            return self._finish_pass(self._watermark, relocated, skipped,
                                     stop_pos=None, next_unscanned=self._scan_start,
                                     stopped=True)
        return self._finish_pass(cutoff, relocated, skipped, None, cutoff)

    def _finish_pass(self, cutoff: int, relocated: int, skipped: int,
                     stop_pos: Optional[int], next_unscanned: int,
                     stopped: bool = False) -> RelocationResult:
        if stop_pos is not None:
            # Advance only through fully-scanned fragments.
            fragment = self.value_wal.config.fragment_size_bytes
            new_watermark = max(self._watermark, stop_pos - stop_pos % fragment)
            self._scan_start = max(self._scan_start, stop_pos)
            stopped = True
        else:
            new_watermark = max(self._watermark, cutoff)
            self._scan_start = max(self._scan_start, next_unscanned)
        self._watermark = new_watermark
        self.fp.hit("relocation.after_watermark")
        # Purge index references below the watermark before any deletion:
        # every relocated or dropped entry leaves the on-disk indices here.
        self.maintenance.flush_dirty(minimum=1)
        self.fp.hit("relocation.after_flushes")
        self.maintenance.write_snapshot()
        self.fp.hit("relocation.after_snapshot")
        deleted = self.value_wal.gc_before(new_watermark)
        self.fp.hit("relocation.after_gc")
        return RelocationResult(relocated=relocated, skipped=skipped,
                                watermark=new_watermark,
                                fragments_deleted=deleted, stopped=stopped)

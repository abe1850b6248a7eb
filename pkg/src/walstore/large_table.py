"""The sharded in-memory index mapping keys to value-log positions.

Keys are partitioned into key spaces, each split into cells covering
contiguous key ranges.  A cell buffers recent writes in memory while the
bulk of its index may live on disk; five residency states track which side
holds what.  Cells are grouped into rows protected by sharded mutexes, so
operations on different rows never contend.

The table itself performs no I/O: reading a flushed index is delegated to
injected ``index_loader`` / ``index_prober`` callables, and no row lock is
ever held across those calls.
"""

from __future__ import annotations

import threading
import zlib
from bisect import bisect_left, insort
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, NamedTuple, Optional, Union

from .bloom import BloomFilter
from .errors import CellStateError
from .index_format import TOMBSTONE_BIT, IndexEntry


@dataclass(frozen=True)
class Uniform:
    cell_count: int

    def __post_init__(self) -> None:
        if self.cell_count < 1 or self.cell_count & (self.cell_count - 1):
            raise ValueError("cell_count must be a power of two")


@dataclass(frozen=True)
class Prefixed:
    prefix_len: int

    def __post_init__(self) -> None:
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")


@dataclass(frozen=True)
class KeySpaceConfig:
    keyspace_id: int
    distribution: Union[Uniform, Prefixed]
    dirty_flush_threshold: int = 4096
    row_count: int = 16


class CellState(Enum):
    EMPTY = "empty"
    LOADED = "loaded"
    UNLOADED = "unloaded"
    DIRTY_LOADED = "dirty_loaded"
    DIRTY_UNLOADED = "dirty_unloaded"


DIRTY_STATES = (CellState.DIRTY_LOADED, CellState.DIRTY_UNLOADED)


class BufferEntry(NamedTuple):
    position: int
    tombstone: bool
    #: Replay pin: the log offset recovery must replay from to reproduce this
    #: entry.  Equals `position` except for batch members, which pin the
    #: batch-start frame so replay always sees whole batches.
    pin: int


@dataclass(frozen=True)
class IndexUpdate:
    keyspace_id: int
    key: bytes
    position: int
    tombstone: bool = False


class LookupKind(Enum):
    FOUND = "found"
    TOMBSTONED = "tombstoned"
    ABSENT = "absent"
    NEED_DISK_PROBE = "need_disk_probe"


@dataclass(frozen=True)
class TableLookup:
    kind: LookupKind
    position: Optional[int] = None
    index_pos: Optional[int] = None
    bloom_rejected: bool = False


@dataclass
class FlushJob:
    entries: dict[bytes, BufferEntry]
    prior_index_pos: Optional[int]
    watermark: int
    epoch: int
    state_at_begin: CellState


class Cell:
    __slots__ = ("keyspace_id", "cell_key", "row", "state", "buffer",
                 "flushed_index_pos", "replay_pos", "bloom",
                 "bloom_authoritative", "flush_epoch", "flush_claimed",
                 "dirty_count", "last_touch")

    def __init__(self, keyspace_id: int, cell_key: bytes, row: int):
        self.keyspace_id = keyspace_id
        self.cell_key = cell_key
        self.row = row
        self.state = CellState.EMPTY
        self.buffer: dict[bytes, BufferEntry] = {}
        self.flushed_index_pos: Optional[int] = None
        self.replay_pos: Optional[int] = None
        self.bloom = BloomFilter()
        self.bloom_authoritative = True
        self.flush_epoch = 0
        self.flush_claimed = False
        self.dirty_count = 0
        self.last_touch = 0

    def __repr__(self) -> str:  # pragma: no cover
        return (f"<Cell ks={self.keyspace_id} key={self.cell_key.hex()} "
                f"{self.state.value} buf={len(self.buffer)}>")


class _KeySpace:
    def __init__(self, config: KeySpaceConfig):
        self.config = config
        self.locks = [threading.RLock() for _ in range(config.row_count)]
        dist = config.distribution
        self.cells: list[Cell] = []
        self.cell_map: dict[bytes, Cell] = {}
        self.sorted_prefixes: list[bytes] = []
        self.map_lock = threading.Lock()
        if isinstance(dist, Uniform):
            self.cells = [
                Cell(config.keyspace_id, index.to_bytes(4, "big"),
                     index % config.row_count)
                for index in range(dist.cell_count)
            ]
            self.cell_bits = dist.cell_count.bit_length() - 1


@dataclass(frozen=True)
class CellSnapshot:
    keyspace_id: int
    cell_key: bytes
    flushed_index_pos: int
    replay_pos: int


@dataclass(frozen=True)
class SnapshotMetadata:
    cells: list[CellSnapshot]
    global_replay_from: int


class LargeTable:
    def __init__(self, keyspaces: list[KeySpaceConfig],
                 index_loader: Optional[Callable[[int], list[IndexEntry]]] = None,
                 index_prober: Optional[Callable[[int, bytes], Optional[int]]] = None):
        if not keyspaces:
            raise ValueError("at least one key space is required")
        self._spaces: dict[int, _KeySpace] = {}
        for config in keyspaces:
            if config.keyspace_id in self._spaces:
                raise ValueError(f"duplicate keyspace id {config.keyspace_id}")
            if not 0 <= config.keyspace_id <= 0xFF:
                raise ValueError("keyspace_id must fit in 8 bits")
            self._spaces[config.keyspace_id] = _KeySpace(config)
        self.index_loader = index_loader
        self.index_prober = index_prober
        self._touch = 0

    # ------------------------------------------------------------------
    # cell addressing

    def _space(self, keyspace_id: int) -> _KeySpace:
        space = self._spaces.get(keyspace_id)
        if space is None:
            raise KeyError(f"unknown keyspace {keyspace_id}")
        return space

    def keyspace_config(self, keyspace_id: int) -> KeySpaceConfig:
        return self._space(keyspace_id).config

    def keyspace_ids(self) -> list[int]:
        return list(self._spaces)

    def locate_cell(self, keyspace_id: int, key: bytes) -> Cell:
        cell, _ = self._locate(keyspace_id, key)
        return cell

    def _locate(self, keyspace_id: int, key: bytes) -> tuple[Cell, threading.RLock]:
        space = self._space(keyspace_id)
        dist = space.config.distribution
        if isinstance(dist, Uniform):
            if len(key) < 4:
                raise ValueError("uniform key spaces require keys of >= 4 bytes")
            if space.cell_bits:
                index = int.from_bytes(key[:4], "big") >> (32 - space.cell_bits)
            else:
                index = 0
            cell = space.cells[index]
            return cell, space.locks[cell.row]
        if len(key) < dist.prefix_len:
            raise ValueError("key shorter than the key space prefix length")
        prefix = key[:dist.prefix_len]
        with space.map_lock:
            cell = space.cell_map.get(prefix)
            if cell is None:
                cell = Cell(keyspace_id, prefix,
                            zlib.crc32(prefix) % space.config.row_count)
                space.cell_map[prefix] = cell
                insort(space.sorted_prefixes, prefix)
        return cell, space.locks[cell.row]

    def row_lock(self, cell: Cell) -> threading.RLock:
        return self._space(cell.keyspace_id).locks[cell.row]

    def iter_cells(self) -> Iterator[Cell]:
        for space in self._spaces.values():
            if isinstance(space.config.distribution, Uniform):
                yield from space.cells
            else:
                with space.map_lock:
                    cells = [space.cell_map[p] for p in space.sorted_prefixes]
                yield from cells

    def restore_cell(self, keyspace_id: int, cell_key: bytes,
                     flushed_index_pos: int, replay_pos: int) -> Cell:
        """Recreate a flushed cell from snapshot metadata: Unloaded, pointer
        set, bloom not yet authoritative (its keys live only on disk)."""
        space = self._space(keyspace_id)
        if isinstance(space.config.distribution, Uniform):
            index = int.from_bytes(cell_key, "big")
            cell = space.cells[index]
        else:
            with space.map_lock:
                cell = space.cell_map.get(cell_key)
                if cell is None:
                    cell = Cell(keyspace_id, cell_key,
                                zlib.crc32(cell_key) % space.config.row_count)
                    space.cell_map[cell_key] = cell
                    insort(space.sorted_prefixes, cell_key)
        cell.state = CellState.UNLOADED
        cell.flushed_index_pos = flushed_index_pos
        cell.replay_pos = replay_pos
        cell.bloom_authoritative = False
        return cell

    # ------------------------------------------------------------------
    # writes

    def apply(self, update: IndexUpdate, replay_pin: Optional[int] = None) -> bool:
        """Record `update` unless an equal-or-higher-position mapping already
        exists for the key (last-writer-wins by log position).

        Returns True when the buffer changed.
        """
        cell, lock = self._locate(update.keyspace_id, update.key)
        pin = update.position if replay_pin is None else replay_pin
        with lock:
            cell.bloom.add(update.key)
            current = cell.buffer.get(update.key)
            if current is not None and current.position >= update.position:
                return False
            cell.buffer[update.key] = BufferEntry(update.position, update.tombstone, pin)
            cell.dirty_count += 1
            self._mark_dirty(cell)
            self._touch_cell(cell)
        return True

    def apply_relocated(self, update: IndexUpdate, old_position: int,
                        last_processed: int) -> bool:
        """Compare-and-set install of a relocated copy.

        The new mapping is applied only while the key's currently effective
        position (buffer entry, else flushed-index entry) is still below the
        captured last-processed watermark; any newer concurrent write wins.
        """
        assert update.position >= last_processed, \
            "relocated copy must sit at or above the captured watermark"
        cell, lock = self._locate(update.keyspace_id, update.key)
        for _ in range(16):
            with lock:
                current = cell.buffer.get(update.key)
                if current is not None:
                    if current.position >= last_processed:
                        return False
                    self._install_relocated(cell, update)
                    return True
                if cell.state in (CellState.LOADED, CellState.DIRTY_LOADED) \
                        or cell.flushed_index_pos is None:
                    # Full map is resident (or nothing on disk): key vanished.
                    return False
                probe_ref = (cell.flushed_index_pos, cell.flush_epoch)
            if self.index_prober is None:
                return False
            raw = self.index_prober(probe_ref[0], update.key)
            with lock:
                if (cell.flushed_index_pos, cell.flush_epoch) != probe_ref \
                        or update.key in cell.buffer:
                    continue  # index changed under the probe; re-evaluate
                if raw is None or raw & TOMBSTONE_BIT:
                    return False
                if raw >= last_processed:
                    return False
                self._install_relocated(cell, update)
                return True
        return False

    def _install_relocated(self, cell: Cell, update: IndexUpdate) -> None:
        cell.bloom.add(update.key)
        cell.buffer[update.key] = BufferEntry(update.position, update.tombstone,
                                              update.position)
        cell.dirty_count += 1
        self._mark_dirty(cell)

    def drop_buffered_tombstone(self, keyspace_id: int, key: bytes,
                                position: int) -> bool:
        """Remove a buffered tombstone iff it still sits at `position`.

        Used by relocation when a tombstone's masked history is about to be
        reclaimed; flushed copies are purged by the next flush merge instead.
        """
        cell, lock = self._locate(keyspace_id, key)
        with lock:
            current = cell.buffer.get(key)
            if current is None or not current.tombstone or current.position != position:
                return False
            del cell.buffer[key]
            return True

    def _mark_dirty(self, cell: Cell) -> None:
        if cell.state in (CellState.EMPTY, CellState.LOADED):
            cell.state = CellState.DIRTY_LOADED
        elif cell.state is CellState.UNLOADED:
            cell.state = CellState.DIRTY_UNLOADED

    def _touch_cell(self, cell: Cell) -> None:
        self._touch += 1
        cell.last_touch = self._touch

    # ------------------------------------------------------------------
    # reads

    def lookup(self, keyspace_id: int, key: bytes) -> TableLookup:
        cell, lock = self._locate(keyspace_id, key)
        with lock:
            if cell.bloom_authoritative and not cell.bloom.may_contain(key):
                return TableLookup(LookupKind.ABSENT, bloom_rejected=True)
            entry = cell.buffer.get(key)
            if entry is not None:
                self._touch_cell(cell)
                if entry.tombstone:
                    return TableLookup(LookupKind.TOMBSTONED, position=entry.position)
                return TableLookup(LookupKind.FOUND, position=entry.position)
            if cell.state in (CellState.LOADED, CellState.DIRTY_LOADED):
                return TableLookup(LookupKind.ABSENT)
            if cell.flushed_index_pos is not None:
                return TableLookup(LookupKind.NEED_DISK_PROBE,
                                   index_pos=cell.flushed_index_pos)
            return TableLookup(LookupKind.ABSENT)

    def note_disk_key(self, keyspace_id: int, key: bytes) -> None:
        """Lazily admit a key discovered by a disk probe into the cell bloom."""
        cell, lock = self._locate(keyspace_id, key)
        with lock:
            cell.bloom.add(key)

    def prev_entry(self, keyspace_id: int, key: bytes
                   ) -> Optional[tuple[bytes, int]]:
        """Largest live key strictly smaller than `key` within the key space.

        Inspecting a cell whose index is on disk loads that index for the
        query (without changing the cell's residency state).
        """
        space = self._space(keyspace_id)
        for cell in self._cells_descending_from(space, key):
            merged = self.merged_view(cell)
            best = None
            for candidate, (position, tombstone) in merged.items():
                if candidate >= key or tombstone:
                    continue
                if best is None or candidate > best[0]:
                    best = (candidate, position)
            if best is not None:
                return best
        return None

    def _cells_descending_from(self, space: _KeySpace, key: bytes) -> Iterator[Cell]:
        dist = space.config.distribution
        if isinstance(dist, Uniform):
            if len(key) < 4:
                raise ValueError("uniform key spaces require keys of >= 4 bytes")
            start = (int.from_bytes(key[:4], "big") >> (32 - space.cell_bits)) \
                if space.cell_bits else 0
            for index in range(start, -1, -1):
                yield space.cells[index]
            return
        prefix = key[:dist.prefix_len]
        with space.map_lock:
            prefixes = list(space.sorted_prefixes)
        idx = bisect_left(prefixes, prefix)
        if idx < len(prefixes) and prefixes[idx] == prefix:
            idx += 1
        for i in range(idx - 1, -1, -1):
            with space.map_lock:
                cell = space.cell_map.get(prefixes[i])
            if cell is not None:
                yield cell

    def merged_view(self, cell: Cell) -> dict[bytes, tuple[int, bool]]:
        """Point-in-time key -> (position, tombstone) map of buffer over
        flushed index; loads the flushed index outside the row lock."""
        lock = self.row_lock(cell)
        with lock:
            buffered = dict(cell.buffer)
            state = cell.state
            index_pos = cell.flushed_index_pos
        merged: dict[bytes, tuple[int, bool]] = {}
        if state in (CellState.UNLOADED, CellState.DIRTY_UNLOADED) \
                and index_pos is not None and self.index_loader is not None:
            for entry in self.index_loader(index_pos):
                merged[entry.key] = (entry.wal_position(), entry.is_tombstone())
        for key, entry in buffered.items():
            merged[key] = (entry.position, entry.tombstone)
        return merged

    def effective_entry(self, keyspace_id: int, key: bytes
                        ) -> Optional[tuple[int, bool]]:
        """(position, tombstone) currently governing `key`, probing the
        flushed index when the cell is not resident; None when absent."""
        cell, lock = self._locate(keyspace_id, key)
        for _ in range(16):
            with lock:
                entry = cell.buffer.get(key)
                if entry is not None:
                    return entry.position, entry.tombstone
                if cell.state in (CellState.LOADED, CellState.DIRTY_LOADED) \
                        or cell.flushed_index_pos is None:
                    return None
                probe_ref = (cell.flushed_index_pos, cell.flush_epoch)
            if self.index_prober is None:
                return None
            raw = self.index_prober(probe_ref[0], key)
            with lock:
                if (cell.flushed_index_pos, cell.flush_epoch) != probe_ref \
                        or key in cell.buffer:
                    continue
                if raw is None:
                    return None
                return raw & ~TOMBSTONE_BIT, bool(raw & TOMBSTONE_BIT)
        return None

    # ------------------------------------------------------------------
    # flushing

    def begin_flush(self, cell: Cell, watermark: int) -> Optional[FlushJob]:
        """Capture an immutable flush snapshot; the cell stays writable.

        `watermark` must be the value log's last-processed position captured
        at or before this call.  Returns None when the cell is not dirty.
        """
        lock = self.row_lock(cell)
        with lock:
            if cell.state not in DIRTY_STATES:
                return None
            cell.flush_epoch += 1
            return FlushJob(entries=dict(cell.buffer),
                            prior_index_pos=cell.flushed_index_pos,
                            watermark=watermark,
                            epoch=cell.flush_epoch,
                            state_at_begin=cell.state)

    def complete_flush(self, cell: Cell, job: FlushJob, new_index_pos: int,
                       absorbed_hashes: Optional[list[tuple[int, int]]] = None) -> bool:
        """Swap in the new index pointer and unmerge the flushed entries.

        Stale jobs (superseded by a newer begin_flush) are discarded.
        `absorbed_hashes` carries bloom hash pairs of keys the flush loaded
        from the previous on-disk index; once absorbed, the bloom covers
        every key of the cell and becomes authoritative again.
        """
        lock = self.row_lock(cell)
        with lock:
            if job.epoch != cell.flush_epoch:
                return False
            cell.flushed_index_pos = new_index_pos
            cell.replay_pos = job.watermark
            buffer = cell.buffer
            for key, snap_entry in job.entries.items():
                current = buffer.get(key)
                if current is not None and \
                        current.position == snap_entry.position and \
                        current.tombstone == snap_entry.tombstone:
                    del buffer[key]
            if not cell.bloom_authoritative and absorbed_hashes is not None:
                for pair in absorbed_hashes:
                    cell.bloom.add_hashed(*pair)
                cell.bloom_authoritative = True
            cell.dirty_count = len(buffer)
            cell.state = CellState.UNLOADED if not buffer else CellState.DIRTY_UNLOADED
            return True

    def try_claim_flush(self, cell: Cell) -> bool:
        lock = self.row_lock(cell)
        with lock:
            if cell.flush_claimed or cell.state not in DIRTY_STATES:
                return False
            cell.flush_claimed = True
            return True

    def release_flush_claim(self, cell: Cell) -> None:
        lock = self.row_lock(cell)
        with lock:
            cell.flush_claimed = False

    def dirty_cells(self, minimum: Optional[int] = None) -> list[Cell]:
        """Dirty, unclaimed cells ordered largest-buffer-first.

        `minimum` overrides each key space's dirty threshold when given."""
        selected = []
        for cell in self.iter_cells():
            threshold = minimum if minimum is not None else \
                self._space(cell.keyspace_id).config.dirty_flush_threshold
            if cell.state in DIRTY_STATES and not cell.flush_claimed \
                    and cell.dirty_count >= threshold:
                selected.append(cell)
        selected.sort(key=lambda c: c.dirty_count, reverse=True)
        return selected

    # ------------------------------------------------------------------
    # residency

    def load_cell(self, cell: Cell, entries: list[IndexEntry]) -> None:
        """Merge flushed entries under the buffer (buffer wins) and make the
        cell memory-resident."""
        lock = self.row_lock(cell)
        with lock:
            if cell.state in (CellState.LOADED, CellState.DIRTY_LOADED):
                return
            merged: dict[bytes, BufferEntry] = {}
            for entry in entries:
                position = entry.wal_position()
                merged[entry.key] = BufferEntry(position, entry.is_tombstone(), position)
                cell.bloom.add(entry.key)
            merged.update(cell.buffer)
            cell.buffer = merged
            cell.bloom_authoritative = True
            cell.state = CellState.DIRTY_LOADED if cell.dirty_count else CellState.LOADED
            self._touch_cell(cell)

    def unload_cell(self, cell: Cell) -> None:
        """Drop the in-memory map of a clean Loaded cell; bloom stays resident."""
        lock = self.row_lock(cell)
        with lock:
            if cell.state is not CellState.LOADED:
                raise CellStateError(
                    f"cannot unload cell in state {cell.state.value}")
            cell.buffer = {}
            cell.state = CellState.UNLOADED

    def resident_entry_count(self) -> int:
        return sum(len(cell.buffer) for cell in self.iter_cells()
                   if cell.state in (CellState.LOADED, CellState.DIRTY_LOADED))

    def evict_loaded_cells(self, entry_budget: int) -> int:
        """Unload clean Loaded cells, least recently used first, until the
        resident entry count fits the budget.  Returns cells evicted."""
        resident = self.resident_entry_count()
        if resident <= entry_budget:
            return 0
        candidates = [cell for cell in self.iter_cells()
                      if cell.state is CellState.LOADED]
        candidates.sort(key=lambda c: c.last_touch)
        evicted = 0
        for cell in candidates:
            if resident <= entry_budget:
                break
            size = len(cell.buffer)
            try:
                self.unload_cell(cell)
            except CellStateError:
                continue
            resident -= size
            evicted += 1
        return evicted

    # ------------------------------------------------------------------
    # snapshots

    def snapshot_metadata(self, default_tail: int) -> SnapshotMetadata:
        """Per-cell flushed pointers plus the global replay-from position.

        Cells are observed one row at a time; never-flushed dirty cells pin
        the global position at their oldest buffered replay pin, and a fully
        empty table contributes `default_tail`.
        """
        cells_meta: list[CellSnapshot] = []
        global_min: Optional[int] = None
        for cell in self.iter_cells():
            lock = self.row_lock(cell)
            with lock:
                if cell.replay_pos is not None:
                    if cell.flushed_index_pos is not None:
                        cells_meta.append(CellSnapshot(
                            cell.keyspace_id, cell.cell_key,
                            cell.flushed_index_pos, cell.replay_pos))
                    contribution: Optional[int] = cell.replay_pos
                elif cell.buffer:
                    contribution = min(entry.pin for entry in cell.buffer.values())
                else:
                    contribution = None
            if contribution is not None:
                global_min = contribution if global_min is None \
                    else min(global_min, contribution)
        return SnapshotMetadata(cells_meta,
                                default_tail if global_min is None else global_min)

    def min_flushed_index_pos(self) -> Optional[int]:
        """Smallest live flushed-index pointer; None when nothing is flushed."""
        minimum: Optional[int] = None
        for cell in self.iter_cells():
            pos = cell.flushed_index_pos
            if pos is not None and (minimum is None or pos < minimum):
                minimum = pos
        return minimum

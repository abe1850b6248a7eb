"""Benchmark harness: fill phase, timed measurement phase with a configurable
op mix and recency-skewed key choice, plus an index-format microbenchmark.

Key streams are pure functions of (seed, index), so a spec with the same
seed always produces the same keys and the same final census.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import index_format
from .db import Db, DbConfig
from .index_format import (CountingSource, FileSource, WindowConfig,
                           entries_from_bytes)
from .large_table import KeySpaceConfig, Uniform
from .relocation import RelocationConfig

BENCH_KEYSPACE = 0


class Ratio(Enum):
    W100 = "w100"
    RW50 = "rw50"
    R100 = "r100"


class ReadOp(Enum):
    GET = "get"
    EXISTS = "exists"
    LT = "lt"


@dataclass
class WorkloadSpec:
    target_fill_bytes: int
    key_size: int = 32
    value_size: int = 1024
    read_write_ratio: Ratio = Ratio.RW50
    read_op: ReadOp = ReadOp.GET
    zipf_theta: float = 0.0
    duration: float = 60.0
    cooldown: float = 0.0
    relocation: bool = False
    seed: int = 0
    workers: int = 8


class KeyCensus:
    """The deterministic key stream: key i is a keyed hash of (seed, i).

    Thread-safe appends extend the stream during the measurement phase so
    fresh writes join the skewed read population.
    """

    def __init__(self, seed: int, key_size: int, count: int):
        self.seed = seed
        self.key_size = key_size
        self._count = count
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def key_at(self, index: int) -> bytes:
        digest = hashlib.blake2b(struct.pack("<QQ", self.seed, index),
                                 digest_size=self.key_size)
        return digest.digest()

    def value_at(self, index: int, value_size: int) -> bytes:
        seed = ~self.seed & 0xFFFFFFFFFFFFFFFF
        digest = hashlib.blake2b(struct.pack("<QQ", seed, index),
                                 digest_size=64).digest()
        reps = (value_size + len(digest) - 1) // len(digest)
        return (digest * reps)[:value_size]

    def append_new(self) -> int:
        with self._lock:
            index = self._count
            self._count += 1
            return index

    def descriptor(self) -> dict:
        return {"seed": self.seed, "key_size": self.key_size,
                "count": self.count}

    @staticmethod
    def from_descriptor(desc: dict) -> "KeyCensus":
        return KeyCensus(desc["seed"], desc["key_size"], desc["count"])


class ZipfSampler:
    """Recency-rank Zipf sampling: rank 1 is the most recently inserted key
    and rank r carries probability proportional to 1/r**theta; theta=0 is
    uniform.  Sampling binary-searches a precomputed cumulative table."""

    def __init__(self, census: KeyCensus, theta: float):
        self.census = census
        self.theta = theta
        self._size = 0
        self._cdf: Optional[np.ndarray] = None
        self._refresh(census.count)

    def _refresh(self, size: int) -> None:
        self._size = size
        if self.theta == 0.0 or size <= 1:
            self._cdf = None
            return
        ranks = np.arange(1, size + 1, dtype=np.float64)
        weights = ranks ** (-self.theta)
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        self._cdf = cdf

    def pick_index(self, rng: np.random.Generator) -> int:
        size = self.census.count
        if size > self._size * 1.01 + 16:
            self._refresh(size)
        size = self._size
        if self._cdf is None:
            return int(rng.integers(0, size))
        rank = int(np.searchsorted(self._cdf, rng.random(), side="right")) + 1
        rank = min(rank, size)
        return size - rank

    def pick(self, rng: np.random.Generator) -> bytes:
        return self.census.key_at(self.pick_index(rng))


def zipf_pick(census: KeyCensus, theta: float, rng: np.random.Generator) -> bytes:
    """One skewed draw from the census (convenience over ZipfSampler)."""
    return ZipfSampler(census, theta).pick(rng)


# ----------------------------------------------------------------------
# engine workloads

def bench_db_config(directory, *, cell_count: int = 256,
                    relocation: bool = False,
                    fragment_size: int = 64 * 1024 * 1024,
                    **overrides) -> DbConfig:
    from .wal import WalConfig
    return DbConfig(
        directory=directory,
        key_spaces=[KeySpaceConfig(BENCH_KEYSPACE, Uniform(cell_count))],
        value_wal=WalConfig(fragment_size_bytes=fragment_size),
        index_wal=WalConfig(fragment_size_bytes=fragment_size),
        auto_relocate=relocation,
        **overrides,
    )


@dataclass
class Report:
    kind: str
    ops_per_second: float
    p50_latency_us: float
    p99_latency_us: float
    op_counts: dict[str, int]
    storage_bytes_final: int
    write_amplification: float
    counters: dict[str, int]
    params: dict = field(default_factory=dict)

    def to_json_line(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("ops/s", f"{self.ops_per_second:,.0f}"),
            ("p50 latency (us)", f"{self.p50_latency_us:.1f}"),
            ("p99 latency (us)", f"{self.p99_latency_us:.1f}"),
            ("storage bytes", f"{self.storage_bytes_final:,}"),
            ("write amplification", f"{self.write_amplification:.4f}"),
        ]
        rows += [(f"ops[{name}]", f"{count:,}")
                 for name, count in sorted(self.op_counts.items())]
        rows += [(f"counter[{name}]", f"{value:,}")
                 for name, value in sorted(self.counters.items())]
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def run_fill(db: Db, spec: WorkloadSpec) -> KeyCensus:
    """Insert floor(target_fill_bytes / entry_size) deterministic entries."""
    entry_size = spec.key_size + spec.value_size
    total = spec.target_fill_bytes // entry_size
    census = KeyCensus(spec.seed, spec.key_size, 0)
    for index in range(total):
        key = census.key_at(index)
        db.put(BENCH_KEYSPACE, key, census.value_at(index, spec.value_size))
        census.append_new()
    return census


def _measure_worker(db: Db, spec: WorkloadSpec, census: KeyCensus,
                    sampler: ZipfSampler, rng: np.random.Generator,
                    deadline: float, counts: dict[str, int],
                    latencies: list[float], errors: list[BaseException]) -> None:
    read_name = spec.read_op.value
    try:
        while time.monotonic() < deadline:
            if spec.read_write_ratio is Ratio.W100:
                do_write = True
            elif spec.read_write_ratio is Ratio.R100:
                do_write = False
            else:
                do_write = bool(rng.integers(0, 2))
            began = time.perf_counter()
            if do_write:
                index = census.append_new()
                db.put(BENCH_KEYSPACE, census.key_at(index),
                       census.value_at(index, spec.value_size))
                counts["put"] += 1
            else:
                key = sampler.pick(rng)
                if spec.read_op is ReadOp.GET:
                    db.get(BENCH_KEYSPACE, key)
                elif spec.read_op is ReadOp.EXISTS:
                    db.exists(BENCH_KEYSPACE, key)
                else:
                    db.less_than(BENCH_KEYSPACE, key)
                counts[read_name] += 1
            latencies.append(time.perf_counter() - began)
    except BaseException as exc:  # surfaced by run_measure
        errors.append(exc)


def run_measure(db: Db, spec: WorkloadSpec, census: KeyCensus) -> Report:
    """Timed measurement phase over an already filled database."""
    if spec.cooldown:
        time.sleep(spec.cooldown)
    sampler = ZipfSampler(census, spec.zipf_theta)
    before = db.metrics_snapshot()
    worker_counts = [dict(put=0, get=0, exists=0, lt=0)
                     for _ in range(spec.workers)]
    worker_lats: list[list[float]] = [[] for _ in range(spec.workers)]
    errors: list[BaseException] = []
    deadline = time.monotonic() + spec.duration
    threads = [
        threading.Thread(
            target=_measure_worker,
            args=(db, spec, census, sampler,
                  np.random.default_rng(spec.seed + 7919 * (i + 1)),
                  deadline, worker_counts[i], worker_lats[i], errors),
            daemon=True)
        for i in range(spec.workers)
    ]
    start = time.monotonic()
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    elapsed = max(time.monotonic() - start, 1e-9)
    if errors:
        raise errors[0]
    after = db.metrics_snapshot()
    counts = {name: sum(wc[name] for wc in worker_counts)
              for name in ("put", "get", "exists", "lt")}
    lats = np.array([lat for wl in worker_lats for lat in wl])
    total_ops = int(lats.size)
    ingested = after.logical_bytes_ingested - before.logical_bytes_ingested
    written = after.wal_bytes_written - before.wal_bytes_written
    return Report(
        kind="measure",
        ops_per_second=total_ops / elapsed,
        p50_latency_us=float(np.percentile(lats, 50) * 1e6) if total_ops else 0.0,
        p99_latency_us=float(np.percentile(lats, 99) * 1e6) if total_ops else 0.0,
        op_counts=counts,
        storage_bytes_final=db.value_wal.disk_bytes(),
        write_amplification=(written / ingested) if ingested else 0.0,
        counters={
            "value_wal_reads": after.value_wal_reads - before.value_wal_reads,
            "index_store_reads": after.index_store_reads - before.index_store_reads,
            "bloom_negative_hits": after.bloom_negative_hits - before.bloom_negative_hits,
            "cache_hits": after.cache_hits - before.cache_hits,
            "cache_misses": after.cache_misses - before.cache_misses,
            "relocated_entries": after.relocated_entries - before.relocated_entries,
        },
        params={"spec": _spec_params(spec), "census_final": census.count},
    )


def _spec_params(spec: WorkloadSpec) -> dict:
    params = dataclasses.asdict(spec)
    params["read_write_ratio"] = spec.read_write_ratio.value
    params["read_op"] = spec.read_op.value
    return params


# ----------------------------------------------------------------------
# index-format microbenchmark

class IndexFormat(Enum):
    OPTIMISTIC = "optimistic"
    HEADER = "header"


def generate_index_bytes(entries: int, rng: np.random.Generator,
                         fmt: IndexFormat = IndexFormat.OPTIMISTIC) -> bytes:
    """Uniform-random sorted unique entries in the requested format."""
    keys = rng.integers(0, 256, size=(entries + 16, 32), dtype=np.uint8)
    raw = np.unique(keys.view([("k", "V32")]).ravel())[:entries]
    if raw.size < entries:
        raise RuntimeError("random key collision burst; retry with a new seed")
    positions = rng.integers(0, 1 << 62, size=entries, dtype=np.uint64)
    arr = np.zeros(entries, dtype=[("k", "V32"), ("p", "<u8")])
    arr["k"] = raw
    arr["p"] = positions
    flat = arr.tobytes()
    if fmt is IndexFormat.OPTIMISTIC:
        return flat
    entries_list = entries_from_bytes(flat)
    return index_format.serialize_header(entries_list)


def run_index_microbench(files: int, entries_per_file: int, lookups: int,
                         windows: list[int], fmt: IndexFormat,
                         directory: str | Path, seed: int = 0,
                         present_fraction: float = 0.0) -> list[Report]:
    """Generate index files, probe them with (predominantly negative) random
    lookups, and report throughput plus iteration histograms per window."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(files):
        data = generate_index_bytes(entries_per_file, rng, fmt)
        path = directory / f"bench-{fmt.value}-{i:05d}.idx"
        path.write_bytes(data)
        paths.append(path)
    reports = []
    for window in windows:
        cfg = WindowConfig(window)
        histogram: dict[int, int] = {}
        reads = 0
        began = time.perf_counter()
        handles = [open(p, "rb") for p in paths]
        try:
            sources = [FileSource(h.fileno(), p.stat().st_size)
                       for h, p in zip(handles, paths)]
            for _ in range(lookups):
                source = CountingSource(sources[int(rng.integers(0, files))])
                key = rng.bytes(32)
                if fmt is IndexFormat.OPTIMISTIC:
                    outcome = index_format.optimistic_lookup(
                        source, entries_per_file, key, cfg)
                    histogram[outcome.iterations] = \
                        histogram.get(outcome.iterations, 0) + 1
                else:
                    index_format.header_lookup(source, key)
                    histogram[source.reads] = histogram.get(source.reads, 0) + 1
                reads += source.reads
        finally:
            for handle in handles:
                handle.close()
        elapsed = max(time.perf_counter() - began, 1e-9)
        reports.append(Report(
            kind="indexbench",
            ops_per_second=lookups / elapsed,
            p50_latency_us=0.0,
            p99_latency_us=0.0,
            op_counts={"lookups": lookups},
            storage_bytes_final=sum(p.stat().st_size for p in paths),
            write_amplification=0.0,
            counters={"reads": reads,
                      **{f"iterations_{k}": v for k, v in sorted(histogram.items())}},
            params={"format": fmt.value, "window": window, "files": files,
                    "entries_per_file": entries_per_file, "seed": seed},
        ))
    for path in paths:
        path.unlink(missing_ok=True)
    return reports

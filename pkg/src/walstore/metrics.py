"""Monotonic engine counters."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass(frozen=True)
class MetricsSnapshot:
    wal_bytes_written: int
    logical_bytes_ingested: int
    value_wal_reads: int
    index_store_reads: int
    bloom_negative_hits: int
    cache_hits: int
    cache_misses: int
    relocated_entries: int
    optimistic_iterations_histogram: dict[int, int] = field(default_factory=dict)


class Metrics:
    """Thread-safe monotonic counters plus the optimistic-probe iteration
    histogram.  Counters never decrease."""

    _COUNTERS = ("wal_bytes_written", "logical_bytes_ingested",
                 "value_wal_reads", "index_store_reads", "bloom_negative_hits",
                 "cache_hits", "cache_misses", "relocated_entries")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts = {name: 0 for name in self._COUNTERS}
        self._iterations: dict[int, int] = {}

    def incr(self, name: str, delta: int = 1) -> None:
        if delta < 0:
            raise ValueError("counters are monotonic")
        with self._lock:
            self._counts[name] += delta

    def record_iterations(self, iterations: int) -> None:
        with self._lock:
            self._iterations[iterations] = self._iterations.get(iterations, 0) + 1

    def snapshot(self) -> MetricsSnapshot:
        with self._lock:
            return MetricsSnapshot(
                optimistic_iterations_histogram=dict(self._iterations),
                **self._counts,
            )


class NullMetrics(Metrics):
    """Metrics sink that discards everything (standalone component tests)."""

    def incr(self, name: str, delta: int = 1) -> None:
        pass

    def record_iterations(self, iterations: int) -> None:
        pass

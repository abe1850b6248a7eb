"""walstore: an embedded key-value engine whose append-only log is the
permanent value store.

Values are written once and never compacted; a sharded, lazily-flushed
in-memory table maps keys to log positions, and on-disk indices are searched
optimistically from a distribution-based position estimate.
"""

from .db import Db, DbConfig, Durability, WriteBatch, open
from .errors import (CellStateError, CorruptionError, LockError,
                     LogClosedError, OutOfRangeError, RelocationBusyError,
                     WalstoreError)
from .index_format import IndexEntry, LookupOutcome, WindowConfig
from .large_table import (CellState, IndexUpdate, KeySpaceConfig, Prefixed,
                          Uniform)
from .metrics import MetricsSnapshot
from .relocation import (RelocationConfig, RelocationDecision,
                         RelocationResult, RelocationStrategy)
from .wal import NO_POSITION, RecordKind, Wal, WalConfig, WalRecord

__all__ = [
    "Db", "DbConfig", "Durability", "WriteBatch", "open",
    "WalstoreError", "CorruptionError", "OutOfRangeError", "LogClosedError",
    "CellStateError", "LockError", "RelocationBusyError",
    "IndexEntry", "LookupOutcome", "WindowConfig",
    "KeySpaceConfig", "Uniform", "Prefixed", "CellState", "IndexUpdate",
    "MetricsSnapshot",
    "RelocationConfig", "RelocationDecision", "RelocationResult",
    "RelocationStrategy",
    "Wal", "WalConfig", "WalRecord", "RecordKind", "NO_POSITION",
]

__version__ = "0.1.0"

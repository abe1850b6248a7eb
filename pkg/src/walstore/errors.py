"""Exception types shared across the engine."""


class WalstoreError(Exception):
    """Base class for all engine errors."""


class CorruptionError(WalstoreError):
    """On-disk bytes failed a checksum or structural validation."""


class OutOfRangeError(WalstoreError):
    """A log position lies beyond the tail or below the GC watermark."""


class LogClosedError(WalstoreError):
    """The log (or engine) has begun shutting down."""


class CellStateError(WalstoreError):
    """An operation was attempted on a cell in an incompatible state."""


class LockError(WalstoreError):
    """The database directory is already locked by another handle."""


class RelocationBusyError(WalstoreError):
    """A relocation pass is already running."""

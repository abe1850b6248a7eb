"""Deterministic fault injection for crash-recovery tests.

Engine code calls ``registry.hit(label)`` at named points along the write,
batch, flush, snapshot, and relocation paths.  Production registries are
inert; tests install a handler that raises :class:`SimulatedCrash` on a
chosen (label, occurrence) pair, after which the harness abandons the
engine exactly as a killed process would.
"""

from __future__ import annotations

import threading
from collections import Counter
from typing import Callable, Optional


class SimulatedCrash(BaseException):
    """Raised by an armed failpoint; derives from BaseException so ordinary
    ``except Exception`` blocks in engine code can never swallow it."""

    def __init__(self, label: str, occurrence: int):
        super().__init__(f"simulated crash at {label}#{occurrence}")
        self.label = label
        self.occurrence = occurrence


class FailpointRegistry:
    """Per-engine registry of named failpoints.

    ``hit`` is on hot paths, so the disarmed check is a single attribute
    read.  Counting and crash arming are used only by tests.
    """

    __slots__ = ("_handler", "_counts", "_lock", "counting")

    def __init__(self) -> None:
        self._handler: Optional[Callable[[str, int], None]] = None
        self._counts: Counter[str] = Counter()
        self._lock = threading.Lock()
        self.counting = False

    def hit(self, label: str) -> None:
        if self._handler is None and not self.counting:
            return
        with self._lock:
            self._counts[label] += 1
            occurrence = self._counts[label]
        handler = self._handler
        if handler is not None:
            handler(label, occurrence)

    def arm_crash(self, label: str, occurrence: int = 1) -> None:
        """Raise SimulatedCrash the `occurrence`-th time `label` is hit."""

        def handler(hit_label: str, hit_occurrence: int) -> None:
            if hit_label == label and hit_occurrence == occurrence:
                raise SimulatedCrash(hit_label, hit_occurrence)

        self.reset_counts()
        self._handler = handler

    def arm_crash_at_event(self, event_index: int) -> None:
        """Raise SimulatedCrash on the Nth fired event overall (1-based)."""
        state = {"seen": 0}
        lock = threading.Lock()

        def handler(hit_label: str, hit_occurrence: int) -> None:
            with lock:
                state["seen"] += 1
                fire = state["seen"] == event_index
            if fire:
                raise SimulatedCrash(hit_label, hit_occurrence)

        self.reset_counts()
        self._handler = handler

    def disarm(self) -> None:
        self._handler = None

    def reset_counts(self) -> None:
        with self._lock:
            self._counts.clear()

    def counts(self) -> Counter:
        with self._lock:
            return Counter(self._counts)


#: Shared inert registry for engines that do no fault injection.
DISABLED = FailpointRegistry()

"""Deterministic discrete-event kernel.

Events are ordered by ``(fire_time, seq)``; ``seq`` is assigned at insertion so
events sharing a timestamp dispatch in the order they were scheduled.  The
kernel holds no random state.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, TextIO


class EventKind(Enum):
    JOB_SUBMISSION = "JobSubmission"
    SCHEDULE_TICK = "ScheduleTick"
    CORRECTION = "CorrectionEvent"
    JOB_COMPLETION = "JobCompletion"
    PRICE_CHANGE = "PriceChange"
    HOUR_BOUNDARY = "HourBoundary"
    INSTANCE_READY = "InstanceReady"
    POSTPONE_EXPIRY = "PostponeExpiry"


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


@dataclass(eq=False)
class SimEvent:
    fire_time: int
    seq: int
    kind: EventKind
    payload: Any = None
    cancelled: bool = field(default=False, repr=False)
    fired: bool = field(default=False, repr=False)

    @property
    def pending(self) -> bool:
        return not (self.cancelled or self.fired)


Handler = Callable[[SimEvent], None]


class Kernel:
    """Virtual clock plus a binary-heap event queue.

    Handlers are registered per :class:`EventKind`.  An event whose kind has no
    handler is still dispatched (and logged) but otherwise ignored.
    """

    def __init__(self, log: Optional[TextIO] = None) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._handlers: dict[EventKind, Handler] = {}
        self._log = log
        self.dispatched = 0

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, fire_time: int, kind: EventKind, payload: Any = None) -> SimEvent:
        fire_time = int(fire_time)
        if fire_time < self.now:
            raise SchedulingError(
                f"cannot schedule {kind.value} at t={fire_time}; clock is at {self.now}"
            )
        event = SimEvent(fire_time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, (fire_time, event.seq, event))
        return event

    def cancel(self, event: Optional[SimEvent]) -> bool:
        if event is None or not event.pending:
            return False
        event.cancelled = True
        return True

    def peek_time(self) -> Optional[int]:
        self._drop_cancelled()
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return sum(1 for _, _, e in self._heap if not e.cancelled)

    def _drop_cancelled(self) -> None:
        heap = self._heap
        while heap and heap[0][2].cancelled:
            heapq.heappop(heap)

    def step(self) -> Optional[SimEvent]:
        """Dispatch the next pending event, or return None if the queue is empty."""
        self._drop_cancelled()
        if not self._heap:
            return None
        _, _, event = heapq.heappop(self._heap)
        self.now = event.fire_time
        event.fired = True
        self.dispatched += 1
        if self._log is not None:
            self._log.write(f"{event.fire_time},{event.seq},{event.kind.value},{_fmt(event.payload)}\n")
        handler = self._handlers.get(event.kind)
        if handler is not None:
            handler(event)
        return event

    def run_until(self, t_end: int) -> int:
        count = 0
        while True:
            nxt = self.peek_time()
            if nxt is None or nxt > t_end:
                break
            self.step()
            count += 1
        if self.peek_time() is not None and t_end > self.now:
            self.now = t_end
        return count

    def run(self, stop: Optional[Callable[[], bool]] = None) -> int:
        """Dispatch until the queue drains or ``stop()`` returns true."""
        count = 0
        while stop is None or not stop():
            if self.step() is None:
                break
            count += 1
        return count


def _fmt(payload: Any) -> str:
    if payload is None:
        return ""
    ident = getattr(payload, "id", None)
    if ident is not None:
        return str(ident)
    return str(payload)

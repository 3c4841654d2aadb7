"""Clocks and the append-only audit event stream."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Protocol

from soasec.core.canonical import canonicalize


class Clock(Protocol):
    def now(self) -> int: ...


class SystemClock:
    def now(self) -> int:
        return int(time.time())


class FrozenClock:
    """A settable clock for tests and deterministic scenario runs."""

    def __init__(self, now: int = 1_700_000_000):
        self._now = int(now)

    def now(self) -> int:
        return self._now

    def set(self, now: int) -> None:
        self._now = int(now)

    def advance(self, seconds: int) -> None:
        self._now += int(seconds)


class EventType(str, Enum):
    MESSAGE_PROCESSED = "message-processed"
    TOKEN_ISSUED = "token-issued"
    TOKEN_VALIDATED = "token-validated"
    TOKEN_REJECTED = "token-rejected"
    AUTHZ_DECISION = "authz-decision"
    INVALID_CLAIMS = "invalid-claims"
    CONFIG_CHANGED = "config-changed"
    ADAPTATION_FIRED = "adaptation-fired"


@dataclass(frozen=True)
class AuditEvent:
    event_type: EventType
    wall: int
    seq: int
    origin: str
    context_id: str
    payload: dict[str, str] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {
            "context": self.context_id,
            "origin": self.origin,
            "payload": dict(self.payload),
            "seq": self.seq,
            "type": self.event_type.value,
            "wall": self.wall,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "AuditEvent":
        return cls(
            EventType(doc["type"]),
            doc["wall"],
            doc["seq"],
            doc["origin"],
            doc["context"],
            dict(doc.get("payload", {})),
        )


class EventLog:
    """Append-only event stream shared by one or more components.

    ``seq`` is a log-wide monotonic counter; ``wall`` comes from the injected
    clock and is forced non-decreasing per origin.
    """

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or SystemClock()
        self._events: list[AuditEvent] = []
        self._last_wall: dict[str, int] = {}
        self._subscribers: list[Callable[[AuditEvent], None]] = []
        self._lock = threading.RLock()

    def emit(
        self,
        event_type: EventType | str,
        origin: str,
        context_id: str = "",
        **payload: Any,
    ) -> AuditEvent:
        with self._lock:
            wall = max(self.clock.now(), self._last_wall.get(origin, 0))
            self._last_wall[origin] = wall
            event = AuditEvent(
                EventType(event_type),
                wall,
                len(self._events),
                origin,
                context_id,
                {k: str(v) for k, v in payload.items()},
            )
            self._events.append(event)
            subscribers = list(self._subscribers)
        for callback in subscribers:
            callback(event)
        return event

    def subscribe(self, callback: Callable[[AuditEvent], None]) -> None:
        with self._lock:
            self._subscribers.append(callback)

    @property
    def events(self) -> tuple[AuditEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def of_type(self, event_type: EventType | str) -> list[AuditEvent]:
        event_type = EventType(event_type)
        return [e for e in self.events if e.event_type is event_type]

    def __len__(self) -> int:
        return len(self._events)

    def to_lines(self) -> bytes:
        return b"".join(canonicalize(e.to_doc()) + b"\n" for e in self.events)


def replay(events: Iterable[AuditEvent], sink: Callable[[AuditEvent], Any]) -> list[Any]:
    """Feed a recorded stream into ``sink`` and collect its non-None results."""
    out = []
    for event in events:
        result = sink(event)
        if result is not None:
            out.append(result)
    return out

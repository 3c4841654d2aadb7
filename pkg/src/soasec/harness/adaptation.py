"""Threshold-based adaptation: count matching events per scope and act at the threshold."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Iterable, Optional

from soasec.core.audit import AuditEvent, EventLog, EventType, replay


class AdaptationActionType(str, Enum):
    NOTIFY_ISSUER = "notify-issuer"
    BLOCK_REQUESTER = "block-requester"


@dataclass(frozen=True)
class AdaptationRule:
    """Fire ``action`` on every ``threshold``-th ``trigger`` event of one (issuer, context) scope.

    ``origin``, when set, only counts events emitted by that component. This
    keeps one rejection from being counted twice when both the gateway and
    the broker behind it report it.
    """

    id: str
    trigger: EventType
    threshold: int
    action: AdaptationActionType
    origin: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "trigger", EventType(self.trigger))
        object.__setattr__(self, "action", AdaptationActionType(self.action))
        if not isinstance(self.threshold, int) or isinstance(self.threshold, bool) or self.threshold < 1:
            raise ValueError("threshold must be an integer >= 1")

    def matches(self, event: AuditEvent) -> bool:
        return event.event_type is self.trigger and (self.origin is None or event.origin == self.origin)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "action": self.action.value,
            "id": self.id,
            "threshold": self.threshold,
            "trigger": self.trigger.value,
        }
        if self.origin is not None:
            doc["origin"] = self.origin
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "AdaptationRule":
        return cls(doc["id"], doc["trigger"], doc["threshold"], doc["action"], doc.get("origin"))


@dataclass(frozen=True)
class Firing:
    rule_id: str
    action: AdaptationActionType
    issuer: str
    context: str
    seq: int  # the event that reached the threshold

    def to_doc(self) -> dict[str, Any]:
        return {
            "action": self.action.value,
            "context": self.context,
            "issuer": self.issuer,
            "rule": self.rule_id,
            "seq": self.seq,
        }


@dataclass(frozen=True)
class ReconfigurationRequest:
    """Asks the issuing partner to tighten how it produces claims for ``context``."""

    issuer: str
    context: str
    rule_id: str
    observed: int

    def to_doc(self) -> dict[str, Any]:
        return {"context": self.context, "issuer": self.issuer, "observed": self.observed, "rule": self.rule_id}


class AdaptationEngine:
    """Counters per (rule, issuer, context), reset whenever the rule fires."""

    def __init__(
        self,
        rules: Iterable[AdaptationRule] = (),
        events: EventLog | None = None,
        origin: str = "adaptation",
        block: Callable[[str, str], None] | None = None,
    ):
        self.rules = list(rules)
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError("adaptation rule ids must be unique")
        self.events = events
        self.origin = origin
        self.block = block
        self.counters: dict[tuple[str, str, str], int] = {}
        self.requests: list[ReconfigurationRequest] = []
        self.firings: list[Firing] = []
        self._lock = threading.Lock()

    def observe(self, event: AuditEvent) -> list[Firing]:
        fired = []
        for rule in self.rules:
            if not rule.matches(event):
                continue
            issuer = str(event.payload.get("issuer", ""))
            key = (rule.id, issuer, event.context_id)
            with self._lock:
                count = self.counters.get(key, 0) + 1
                if count < rule.threshold:
                    self.counters[key] = count
                    continue
                self.counters[key] = 0
                firing = Firing(rule.id, rule.action, issuer, event.context_id, event.seq)
                self.firings.append(firing)
            self._act(rule, firing)
            fired.append(firing)
        return fired

    def step(self, event: AuditEvent) -> Optional[Firing]:
        fired = self.observe(event)
        return fired[0] if fired else None

    def _act(self, rule: AdaptationRule, firing: Firing) -> None:
        if rule.action is AdaptationActionType.NOTIFY_ISSUER:
            self.requests.append(ReconfigurationRequest(firing.issuer, firing.context, rule.id, rule.threshold))
        elif self.block is not None:
            self.block(firing.issuer, firing.context)
        if self.events is not None:
            self.events.emit(
                EventType.ADAPTATION_FIRED,
                self.origin,
                firing.context,
                rule=rule.id,
                action=rule.action.value,
                issuer=firing.issuer,
                trigger_seq=firing.seq,
            )

    def attach(self, log: EventLog) -> None:
        log.subscribe(self.observe)

    def replay(self, events: Iterable[AuditEvent]) -> list[Firing]:
        """Feed a recorded stream; returns the firings in order."""
        out: list[Firing] = []
        for fired in replay(events, self.observe):
            out.extend(fired)
        return out


def adaptation_step(engine: AdaptationEngine, event: AuditEvent) -> Optional[Firing]:
    return engine.step(event)

"""Gateway instances: bundle lifecycle, ECP selection, chain assembly and execution."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

from soasec.core.audit import Clock, EventLog, EventType, SystemClock
from soasec.gateway.interceptors import (
    INTERCEPTORS,
    OBLIGATIONS,
    BadInterceptorConfig,
    Interceptor,
    StepContext,
    StepFailure,
)
from soasec.gateway.message import Message
from soasec.gateway.policy import (
    CEP,
    DUALS,
    ECP,
    IRP,
    NEEDS,
    ActionType,
    InvalidBundle,
    PolicyBundle,
    Step,
    assertion_id,
    derive_cep,
)
from soasec.gateway.services import ServiceDirectory
from soasec.pdp.model import Obligation, TargetMatcher, eval_condition


class Status(str, Enum):
    CREATED = "created"
    ACTIVE = "active"
    INACTIVE = "inactive"
    DESTROYED = "destroyed"


class LifecycleOp(str, Enum):
    LOAD = "load"
    ACTIVATE = "activate"
    DEACTIVATE = "deactivate"
    DESTROY = "destroy"
    ROLLBACK = "rollback"


class Outcome(str, Enum):
    FORWARDED = "forwarded"
    REJECTED = "rejected"


class IllegalTransition(Exception):
    pass


class UnmappedAction(Exception):
    pass


class WorkerUnavailable(Exception):
    pass


DEFAULT_NESTING_CAP = 4


@dataclass(frozen=True)
class TraceEntry:
    ecp: str
    index: int
    action: str
    status: str  # ok | skipped | failed
    reason: str = ""
    node: str = ""

    def to_doc(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "ecp": self.ecp,
            "index": self.index,
            "node": self.node,
            "reason": self.reason,
            "status": self.status,
        }


@dataclass(frozen=True)
class ProcessResult:
    outcome: Outcome
    message: Message
    trace: tuple[TraceEntry, ...] = ()
    reason: str = ""
    failed_step: str = ""
    ecp_id: str = ""

    @property
    def forwarded(self) -> bool:
        return self.outcome is Outcome.FORWARDED

    def outcome_doc(self) -> dict[str, Any]:
        """Everything but placement details; composites must match a single node on this."""
        return {
            "ecp": self.ecp_id,
            "failed": self.failed_step,
            "message": self.message.to_doc(),
            "outcome": self.outcome.value,
            "reason": self.reason,
            "steps": [[t.ecp, t.index, t.status] for t in self.trace],
        }

    def to_doc(self) -> dict[str, Any]:
        doc = self.outcome_doc()
        doc["trace"] = [t.to_doc() for t in self.trace]
        return doc


class _Rejected(Exception):
    def __init__(self, reason: str, failed_step: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.failed_step = failed_step


@dataclass(frozen=True)
class LoadedBundle:
    bundle: PolicyBundle
    ceps: Mapping[str, CEP]


def effective_usp_ref(step: Step, irp: IRP) -> Optional[str]:
    if step.usp_ref is not None:
        return step.usp_ref
    entry = irp.get(step.action)
    return entry.usp_ref if entry is not None else None


def assemble_chain(ecp: ECP, irp: IRP, registry: Mapping[str, type[Interceptor]] = INTERCEPTORS) -> list[Interceptor]:
    """Instantiate one interceptor per step; nothing runs unless all succeed."""
    chain = []
    for i, step in enumerate(ecp.steps):
        entry = irp.get(step.action)
        if entry is None:
            raise UnmappedAction(f"{ecp.id}#{i}: no interceptor for {step.action.value}")
        cls = registry.get(entry.implementation)
        if cls is None or cls.action is not step.action:
            raise UnmappedAction(f"{ecp.id}#{i}: implementation {entry.implementation!r} cannot run {step.action.value}")
        chain.append(cls({**entry.config, **step.params}))
    return chain


def predicate_matches(predicate: TargetMatcher, lookup: Callable[[str], list[Any]]) -> bool:
    """Every clause must be met by some value the message yields for its reference."""
    return all(any(c.matches_value(v) for v in lookup(c.attribute_id)) for c in predicate.clauses)


Placement = Callable[[ECP, int, Step], Sequence["GatewayInstance"]]


class GatewayInstance:
    """A policy enforcement point.

    Per-ECP enforcement state is read as a snapshot when a message starts and
    the variables it touched are written back when it ends (last writer wins).
    """

    def __init__(
        self,
        instance_id: str,
        services: ServiceDirectory | None = None,
        events: EventLog | None = None,
        clock: Clock | None = None,
        nesting_cap: int = DEFAULT_NESTING_CAP,
        interceptors: Mapping[str, type[Interceptor]] | None = None,
        obligations: Mapping[str, Callable[[Obligation, StepContext], None]] | None = None,
    ):
        self.id = instance_id
        self.services = services or ServiceDirectory()
        self.clock = clock or SystemClock()
        self.events = events if events is not None else EventLog(self.clock)
        self.nesting_cap = nesting_cap
        self.interceptors = dict(interceptors or INTERCEPTORS)
        self.obligations = dict(obligations or OBLIGATIONS)
        self.status = Status.CREATED
        self._history: list[LoadedBundle] = []
        self._state: dict[str, dict[str, Any]] = {}
        self._blocked: set[tuple[str, str]] = set()
        self._lock = threading.RLock()
        self.step_listeners: list[Callable[[TraceEntry, Message], None]] = []
        self.available = True
        self.outstanding = 0
        self.executed = 0
        self._fail_after: Optional[int] = None

    # -- introspection ---------------------------------------------------------

    @property
    def current(self) -> Optional[LoadedBundle]:
        return self._history[-1] if self._history else None

    @property
    def bundle(self) -> Optional[PolicyBundle]:
        cur = self.current
        return cur.bundle if cur else None

    @property
    def history(self) -> tuple[str, ...]:
        return tuple(b.bundle.version for b in self._history)

    def ceps(self) -> dict[str, CEP]:
        cur = self.current
        return dict(cur.ceps) if cur else {}

    def state(self, ecp_id: str) -> dict[str, Any]:
        with self._lock:
            return dict(self._state.get(ecp_id, {}))

    # -- lifecycle -------------------------------------------------------------

    def validate_bundle(self, bundle: PolicyBundle) -> LoadedBundle:
        ids = [e.id for e in bundle.ecps]
        if len(set(ids)) != len(ids):
            raise InvalidBundle("duplicate ECP id")
        for ref, spec in bundle.usp.refs.items():
            if spec.endpoint.uri not in self.services:
                raise InvalidBundle(f"USP {ref!r}: nothing bound at {spec.endpoint.uri}")
        for action, entry in bundle.irp.entries.items():
            if entry.usp_ref is not None and entry.usp_ref not in bundle.usp.refs:
                raise InvalidBundle(f"IRP {action.value}: dangling USP reference {entry.usp_ref!r}")
        for ecp in bundle.ecps:
            try:
                assemble_chain(ecp, bundle.irp, self.interceptors)
            except (UnmappedAction, BadInterceptorConfig) as exc:
                raise InvalidBundle(str(exc)) from exc
            for i, step in enumerate(ecp.steps):
                where = f"{ecp.id}#{i}"
                need = NEEDS.get(step.action)
                ref = effective_usp_ref(step, bundle.irp)
                if step.usp_ref is not None and step.usp_ref not in bundle.usp.refs:
                    raise InvalidBundle(f"{where}: dangling USP reference {step.usp_ref!r}")
                if need is not None:
                    if ref is None or ref not in bundle.usp.refs:
                        raise InvalidBundle(f"{where}: {step.action.value} needs a {need.value} utility")
                    if bundle.usp.refs[ref].interface is not need:
                        raise InvalidBundle(f"{where}: {ref!r} is not a {need.value}")
                if step.action is ActionType.INVOKE_POLICY and bundle.ecp(step.params["policy"]) is None:
                    raise InvalidBundle(f"{where}: unknown policy {step.params['policy']!r}")
                for eff in step.effects:
                    if eff.var not in ecp.state:
                        raise InvalidBundle(f"{where}: effect on undeclared state {eff.var!r}")
        return LoadedBundle(bundle, {e.id: derive_cep(e) for e in bundle.ecps})

    def _fresh_state(self, bundle: PolicyBundle) -> dict[str, dict[str, Any]]:
        return {e.id: dict(e.state) for e in bundle.ecps}

    def lifecycle(self, op: LifecycleOp | str, bundle: PolicyBundle | None = None) -> Status:
        op = LifecycleOp(op)
        with self._lock:
            before = self.status
            if self.status is Status.DESTROYED:
                raise IllegalTransition(f"{self.id} is destroyed")
            if op is LifecycleOp.LOAD:
                if bundle is None:
                    raise IllegalTransition("load needs a bundle")
                loaded = self.validate_bundle(bundle)  # raises before anything changes
                self._history.append(loaded)
                self._state = self._fresh_state(bundle)
            elif op is LifecycleOp.ACTIVATE:
                if self.current is None or self.status is Status.ACTIVE:
                    raise IllegalTransition(f"cannot activate from {self.status.value}")
                self.status = Status.ACTIVE
            elif op is LifecycleOp.DEACTIVATE:
                if self.status is not Status.ACTIVE:
                    raise IllegalTransition(f"cannot deactivate from {self.status.value}")
                self.status = Status.INACTIVE
            elif op is LifecycleOp.DESTROY:
                if self.status is Status.ACTIVE:
                    raise IllegalTransition("deactivate before destroying")
                self.status = Status.DESTROYED
            elif op is LifecycleOp.ROLLBACK:
                if len(self._history) < 2:
                    raise IllegalTransition("rollback needs two successful loads")
                self._history.pop()
                self._state = self._fresh_state(self._history[-1].bundle)
            self.events.emit(
                EventType.CONFIG_CHANGED,
                self.id,
                "",
                op=op.value,
                before=before.value,
                after=self.status.value,
                version=self.bundle.version if self.bundle else "",
            )
            return self.status

    def load(self, bundle: PolicyBundle) -> Status:
        return self.lifecycle(LifecycleOp.LOAD, bundle)

    def activate(self) -> Status:
        return self.lifecycle(LifecycleOp.ACTIVATE)

    def deactivate(self) -> Status:
        return self.lifecycle(LifecycleOp.DEACTIVATE)

    def destroy(self) -> Status:
        return self.lifecycle(LifecycleOp.DESTROY)

    def rollback(self) -> Status:
        return self.lifecycle(LifecycleOp.ROLLBACK)

    def export_state(self) -> dict[str, Any]:
        """Status, bundle history and enforcement state, for tools that persist instances."""
        with self._lock:
            return {
                "enforcement": {k: dict(v) for k, v in self._state.items()},
                "history": [b.bundle.to_doc() for b in self._history],
                "status": self.status.value,
            }

    def import_state(self, doc: Mapping[str, Any]) -> None:
        """Inverse of :meth:`export_state`; every bundle is revalidated first."""
        loaded = [self.validate_bundle(PolicyBundle.from_doc(b)) for b in doc.get("history", [])]
        status = Status(doc.get("status", Status.CREATED.value))
        if status is Status.ACTIVE and not loaded:
            raise IllegalTransition("an active instance needs a bundle")
        with self._lock:
            self._history = loaded
            self.status = status
            self._state = self._fresh_state(loaded[-1].bundle) if loaded else {}
            for ecp_id, values in dict(doc.get("enforcement", {})).items():
                if ecp_id in self._state:
                    self._state[ecp_id].update({k: v for k, v in values.items() if k in self._state[ecp_id]})

    # -- adaptation hooks ----------------------------------------------------------

    def block(self, issuer: str, context: str) -> None:
        with self._lock:
            self._blocked.add((issuer, context))
        self.events.emit(EventType.CONFIG_CHANGED, self.id, context, op="block", issuer=issuer)

    def is_blocked(self, issuer: str, context: str) -> bool:
        return (issuer, context) in self._blocked

    def fulfil(self, ob: Obligation, ctx: StepContext) -> None:
        handler = self.obligations.get(ob.id)
        if handler is None:
            raise StepFailure(f"obligation:unknown:{ob.id}")
        handler(ob, ctx)

    # -- fault injection for cluster workers ------------------------------------------

    def fail_after(self, steps: Optional[int]) -> None:
        """Become unavailable after ``steps`` more step executions (None: never)."""
        self._fail_after = steps

    def execute(self, interceptor: Interceptor, ctx: StepContext) -> None:
        if not self.available:
            raise WorkerUnavailable(self.id)
        if self._fail_after is not None:
            if self._fail_after <= 0:
                self.available = False
                raise WorkerUnavailable(self.id)
            self._fail_after -= 1
        with self._lock:
            self.outstanding += 1
        try:
            interceptor.run(ctx)
        finally:
            with self._lock:
                self.outstanding -= 1
                self.executed += 1

    # -- processing ------------------------------------------------------------------

    def select_ecp(self, msg: Message, loaded: LoadedBundle | None = None) -> tuple[ECP, list[str]]:
        loaded = loaded or self.current
        if loaded is None:
            raise _Rejected("no-policy")
        hits = [e for e in loaded.bundle.ecps if predicate_matches(e.predicate, msg.lookup)]
        if not hits:
            raise _Rejected("no-policy")
        return hits[0], [e.id for e in hits]

    def process(self, msg: Message) -> ProcessResult:
        return run_message(self, msg, lambda ecp, i, step: [self])


def run_message(
    owner: GatewayInstance,
    msg_in: Message,
    placement: Placement,
    origin: Optional[str] = None,
) -> ProcessResult:
    """Run ``msg_in`` through ``owner``'s current bundle.

    ``owner`` selects the ECP and holds the authoritative state; ``placement``
    names, per step, the nodes that may execute it (tried in order).
    """
    msg = msg_in.copy()
    trace: list[TraceEntry] = []
    loaded = owner.current
    status = owner.status
    ecp_id = ""
    touched: dict[str, dict[str, Any]] = {}
    ambiguous: list[str] = []
    try:
        if status is not Status.ACTIVE:
            raise _Rejected("instance-destroyed" if status is Status.DESTROYED else "instance-inactive")
        assert loaded is not None
        ecp, hits = owner.select_ecp(msg, loaded)
        ecp_id = ecp.id
        if len(hits) > 1:
            ambiguous = hits
        with owner._lock:
            snapshot = {k: dict(v) for k, v in owner._state.items()}
        runner = _Runner(owner, loaded, msg, snapshot, touched, trace, placement)
        runner.run_ecp(ecp, 0)
        outcome, reason, failed = Outcome.FORWARDED, "", ""
    except _Rejected as rej:
        outcome, reason, failed = Outcome.REJECTED, rej.reason, rej.failed_step
    if touched:
        with owner._lock:
            for eid, values in touched.items():
                owner._state.setdefault(eid, {}).update(values)
    payload = {"outcome": outcome.value, "ecp": ecp_id, "reason": reason, "correlation": msg.correlation_id}
    if ambiguous:
        payload["ambiguous"] = ",".join(ambiguous)
    owner.events.emit(EventType.MESSAGE_PROCESSED, origin or owner.id, msg.headers.get("context-reference", ""), **payload)
    return ProcessResult(outcome, msg, tuple(trace), reason, failed, ecp_id)


class _Runner:
    def __init__(
        self,
        owner: GatewayInstance,
        loaded: LoadedBundle,
        msg: Message,
        state: dict[str, dict[str, Any]],
        touched: dict[str, dict[str, Any]],
        trace: list[TraceEntry],
        placement: Placement,
    ):
        self.owner = owner
        self.loaded = loaded
        self.msg = msg
        self.state = state
        self.touched = touched
        self.trace = trace
        self.placement = placement

    def _log(self, entry: TraceEntry) -> None:
        self.trace.append(entry)
        for listener in self.owner.step_listeners:
            listener(entry, self.msg)

    def _lookup(self, ecp: ECP) -> Callable[[str], list[Any]]:
        def lookup(ref: str) -> list[Any]:
            if ref.startswith("state."):
                name = ref[len("state.") :]
                st = self.state.get(ecp.id, {})
                return [st[name]] if name in st else []
            return self.msg.lookup(ref)

        return lookup

    def run_ecp(self, ecp: ECP, depth: int) -> None:
        if depth > self.owner.nesting_cap:
            raise _Rejected("nesting-limit", ecp.id)
        bundle = self.loaded.bundle
        try:
            chain = assemble_chain(ecp, bundle.irp, self.owner.interceptors)
        except (UnmappedAction, BadInterceptorConfig) as exc:
            raise _Rejected(f"unmapped-action:{exc}", ecp.id) from exc
        state = self.state.setdefault(ecp.id, dict(ecp.state))
        for i, (step, icpt) in enumerate(zip(ecp.steps, chain)):
            where = assertion_id(ecp.id, i)
            if step.condition is not None:
                verdict = eval_condition(step.condition, self._lookup(ecp))
                if verdict is None:
                    self._log(TraceEntry(ecp.id, i, step.action.value, "failed", "condition-indeterminate"))
                    raise _Rejected("condition-indeterminate", where)
                if not verdict:
                    self._log(TraceEntry(ecp.id, i, step.action.value, "skipped"))
                    continue

            def nested(policy_id: str, depth: int = depth) -> None:
                target = bundle.ecp(policy_id)
                if target is None:
                    raise StepFailure(f"unknown-policy:{policy_id}")
                self.run_ecp(target, depth + 1)

            node_id = self._execute(ecp, i, step, icpt, state, nested, where)
            for eff in step.effects:
                eff.apply(state)
                self.touched.setdefault(ecp.id, {})[eff.var] = state[eff.var]
            if step.action in DUALS:
                self.msg.annotations.setdefault("assertions", []).append(where)
            self._log(TraceEntry(ecp.id, i, step.action.value, "ok", node=node_id))

    def _execute(self, ecp, i, step, icpt, state, nested, where) -> str:
        candidates = self.placement(ecp, i, step)
        for node in candidates:
            ctx = StepContext(
                self.msg, state, ecp, i, effective_usp_ref(step, self.loaded.bundle.irp),
                self.loaded.bundle.usp, node, nested,
            )
            try:
                node.execute(icpt, ctx)
                return node.id
            except WorkerUnavailable:
                continue
            except StepFailure as exc:
                self._log(TraceEntry(ecp.id, i, step.action.value, "failed", exc.reason, node.id))
                raise _Rejected(exc.reason, where) from exc
        self._log(TraceEntry(ecp.id, i, step.action.value, "failed", "cluster-exhausted"))
        raise _Rejected("cluster-exhausted", where)

"""Decision evaluation: targets, rules, constrained delegation, and ``decide``."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence

from soasec.core.audit import Clock, EventLog, EventType, SystemClock
from soasec.core.canonical import parse
from soasec.core.model import Attribute, Category, attr
from soasec.pdp.combining import combine_with_winners
from soasec.pdp.model import (
    AuthzPolicy,
    CombiningAlg,
    Decision,
    DecisionRequest,
    DecisionResponse,
    DelegationConstraint,
    Obligation,
    PolicyKind,
    RequestError,
    ResourceDecision,
    TargetMatcher,
    TraceEntry,
    eval_condition,
)
from soasec.pdp.store import PolicyStore, StoreSnapshot

log = logging.getLogger(__name__)

RESOURCE_ID = "resource.id"
DELEGATE_ID = "delegate.id"
DELEGATED_PREFIX = "delegated."


def match_target(target: TargetMatcher, req: DecisionRequest) -> bool:
    """Every clause must be met by some attribute value in the request."""
    return all(
        any(clause.matches_value(a.value) for a in req.attributes if a.id == clause.attribute_id)
        for clause in target.clauses
    )


# -- attribute resolution ----------------------------------------------------


class AttributeProvider(Protocol):
    def __call__(self, attribute_id: str, req: DecisionRequest) -> Sequence[Any]: ...


class FileAttributeProvider:
    """Attributes keyed by subject id, read from a canonical document.

    Document shape: ``{"alice": {"subject.clearance": ["high"]}, ...}``.
    """

    def __init__(self, data: dict[str, dict[str, list[Any]]], name: str = "file"):
        self.data = data
        self.name = name

    @classmethod
    def from_file(cls, path: str | Path) -> "FileAttributeProvider":
        return cls(parse(Path(path).read_bytes()), name=str(path))

    def __call__(self, attribute_id: str, req: DecisionRequest) -> list[Any]:
        out: list[Any] = []
        for subject in req.values("subject.id"):
            out.extend(self.data.get(subject, {}).get(attribute_id, []))
        return out


def resolve_attribute(
    attribute_id: str,
    req: DecisionRequest,
    providers: Sequence[AttributeProvider],
    failures: list[str] | None = None,
) -> list[Any]:
    """Request-local values win; otherwise the first provider with values."""
    local = req.values(attribute_id)
    if local:
        return local
    for i, provider in enumerate(providers):
        try:
            values = list(provider(attribute_id, req))
        except Exception as exc:  # provider failure is a result, not a crash
            log.debug("attribute provider %d failed for %s: %s", i, attribute_id, exc)
            if failures is not None:
                failures.append(f"provider-{i}:{attribute_id}:{type(exc).__name__}")
            continue
        if values:
            return values
    return []


class _Lookup:
    """Per-evaluation resolver with a cache confined to one sub-request."""

    def __init__(self, req: DecisionRequest, providers: Sequence[AttributeProvider]):
        self.req = req
        self.providers = providers
        self.cache: dict[str, list[Any]] = {}
        self.failures: list[str] = []

    def __call__(self, attribute_id: str) -> list[Any]:
        if attribute_id not in self.cache:
            self.cache[attribute_id] = resolve_attribute(attribute_id, self.req, self.providers, self.failures)
        return self.cache[attribute_id]


# -- single policy -----------------------------------------------------------


def evaluate_policy(
    policy: AuthzPolicy,
    req: DecisionRequest,
    resolver: Callable[[str], Sequence[Any]] | Sequence[AttributeProvider] | None = None,
) -> tuple[Decision, tuple[Obligation, ...]]:
    """Evaluate one access policy; errors surface as Indeterminate."""
    if resolver is None or not callable(resolver):
        resolver = _Lookup(req, list(resolver or []))
    if not match_target(policy.target, req):
        return Decision.NOT_APPLICABLE, ()
    rule_results: list[tuple[int, Decision]] = []
    for index, rule in enumerate(policy.rules):
        if rule.condition is None:
            outcome: Optional[bool] = True
        else:
            try:
                outcome = eval_condition(rule.condition, resolver)
            except Exception as exc:
                log.debug("condition of %s/%s failed: %s", policy.id, rule.id, exc)
                outcome = None
        if outcome is None:
            rule_results.append((-index, Decision.INDETERMINATE))
        elif outcome:
            rule_results.append((-index, rule.effect))
        else:
            rule_results.append((-index, Decision.NOT_APPLICABLE))
    decision, winners = combine_with_winners(rule_results, policy.combining_alg)
    obligations = tuple(o for i in winners for o in policy.rules[i].obligations)
    return decision, obligations


# -- constrained delegation --------------------------------------------------


def admits(constraint: DelegationConstraint, policy: AuthzPolicy) -> bool:
    """Does the constraint allow ``policy`` to be issued under it?

    Access policies: their attribute ids, combining algorithm and target must
    fall inside the constraint. Administrative policies may only narrow: their
    own constraint must be contained in this one.
    """
    if policy.delegation is None:
        return (
            policy.attribute_ids() <= constraint.allowed_attribute_ids
            and policy.combining_alg in constraint.allowed_combining_algs
            and constraint.target_scope.subsumes(policy.target)
        )
    inner = policy.delegation
    return (
        inner.allowed_attribute_ids <= constraint.allowed_attribute_ids
        and inner.allowed_combining_algs <= constraint.allowed_combining_algs
        and constraint.target_scope.subsumes(inner.target_scope)
    )


def administrative_request(req: DecisionRequest, delegate: str) -> DecisionRequest:
    """Re-tag the access situation under ``delegated.*`` and add the delegate."""
    attrs = [
        Attribute(a.category, DELEGATED_PREFIX + a.id, a.value, a.value_type) for a in req.attributes
    ]
    attrs.append(Attribute(Category.DELEGATE, DELEGATE_ID, delegate))
    return DecisionRequest(tuple(attrs), req.resource_ids, req.context_id)


@dataclass(frozen=True)
class DelegationResult:
    authorized: bool
    chain: tuple[str, ...] = ()


def validate_delegation(
    policy: AuthzPolicy,
    req: DecisionRequest,
    admin_policies: Iterable[AuthzPolicy] | StoreSnapshot | PolicyStore,
    now: int | None = None,
) -> DelegationResult:
    """Search for a chain of administrative policies from a root anchor to ``policy``.

    Every link must match the administrative request for the next issuer and
    admit the next policy; the number of delegation steps may not exceed the
    smallest ``max_chain_depth`` on the chain; an issuer may appear at most
    once (cycle guard). Root anchors are tried before administrative
    policies, each in id order, so the returned chain is deterministic.
    """
    if isinstance(admin_policies, PolicyStore):
        admin_policies = admin_policies.snapshot()
    if isinstance(admin_policies, StoreSnapshot):
        if now is None:
            raise ValueError("now is required when passing a store snapshot")
        admin_policies = admin_policies.active(now)
    admins = sorted(
        (p for p in admin_policies if p.delegation is not None),
        key=lambda p: (p.kind is not PolicyKind.ROOT, p.id),
    )
    if policy.issuer is None:
        return DelegationResult(policy.kind is PolicyKind.ROOT, (policy.id,))

    def search(current: AuthzPolicy, visited: frozenset[str], chain: list[AuthzPolicy]) -> Optional[list[AuthzPolicy]]:
        areq = administrative_request(req, current.issuer or "")
        on_chain = {p.id for p in chain}
        for admin in admins:
            if admin.id in on_chain:
                continue
            if not match_target(admin.target, areq) or not admits(admin.delegation, current):
                continue
            candidate = [admin] + chain
            cap = min(p.delegation.max_chain_depth for p in candidate if p.delegation is not None)
            if len(candidate) - 1 > cap:
                continue
            if admin.kind is PolicyKind.ROOT:
                return candidate
            if admin.issuer is None or admin.issuer in visited:
                continue
            found = search(admin, visited | {admin.issuer}, candidate)
            if found is not None:
                return found
        return None

    found = search(policy, frozenset({policy.issuer}), [policy])
    if found is None:
        return DelegationResult(False, ())
    return DelegationResult(True, tuple(p.id for p in found))


# -- request pipeline --------------------------------------------------------


def preprocess(req: DecisionRequest) -> list[DecisionRequest]:
    """Split into one request per (deduplicated) resource id, in order.

    Each sub-request carries every non-``resource.id`` attribute of the
    original plus ``resource.id`` set to its resource.
    """
    seen: list[str] = []
    for rid in req.resource_ids:
        if rid not in seen:
            seen.append(rid)
    shared = tuple(a for a in req.attributes if a.id != RESOURCE_ID)
    return [
        DecisionRequest(shared + (attr(RESOURCE_ID, rid),), (rid,), req.context_id) for rid in seen
    ]


class PDP:
    """Attribute-based decision point over a :class:`PolicyStore`.

    ``decide`` is side-effect free apart from optional audit events; it reads
    one store snapshot per call.
    """

    def __init__(
        self,
        store: PolicyStore,
        providers: Sequence[AttributeProvider] = (),
        clock: Clock | None = None,
        events: EventLog | None = None,
        origin: str = "pdp",
        partial_evaluation: bool = False,
    ):
        self.store = store
        self.providers = list(providers)
        self.clock = clock or store.clock or SystemClock()
        self.events = events
        self.origin = origin
        self.partial_evaluation = partial_evaluation

    def decide(self, req: DecisionRequest, *, partial_evaluation: bool | None = None) -> DecisionResponse:
        response = decide(
            req,
            self.store,
            self.providers,
            now=self.clock.now(),
            partial_evaluation=self.partial_evaluation if partial_evaluation is None else partial_evaluation,
        )
        if self.events is not None:
            for rid, result in response.results.items():
                self.events.emit(
                    EventType.AUTHZ_DECISION,
                    self.origin,
                    req.context_id,
                    resource=rid,
                    decision=result.decision.value,
                )
        return response


def decide(
    req: DecisionRequest,
    store: PolicyStore | StoreSnapshot,
    providers: Sequence[AttributeProvider] = (),
    *,
    now: int | None = None,
    partial_evaluation: bool = False,
) -> DecisionResponse:
    """Per resource: candidates -> delegation check -> evaluate -> priority-override.

    Applicable policies are ordered by descending priority, ties by id.
    Delegated policies with no authorizing chain are recorded in the trace
    as NotApplicable and take no part in combination.
    """
    try:
        req.validate()
    except RequestError:
        raise
    except Exception as exc:
        raise RequestError(str(exc)) from exc
    if isinstance(store, PolicyStore):
        if now is None:
            now = store.clock.now()
        snapshot = store.snapshot()
    else:
        snapshot = store
        if now is None:
            raise ValueError("now is required when deciding against a snapshot")

    subs = preprocess(req)
    active = snapshot.active(now)
    access = [p for p in active if p.delegation is None]
    admins = [p for p in active if p.delegation is not None]
    if partial_evaluation:
        access = [p for p in access if any(match_target(p.target, s) for s in subs)]
    access.sort(key=lambda p: (-p.priority, p.id))

    results: dict[str, ResourceDecision] = {}
    trace: list[TraceEntry] = []
    for sub in subs:
        rid = sub.resource_ids[0]
        lookup = _Lookup(sub, providers)
        combined: list[tuple[int, Decision]] = []
        contributors: list[tuple[AuthzPolicy, tuple[Obligation, ...]]] = []
        for policy in access:
            if not match_target(policy.target, sub):
                continue
            if policy.kind is PolicyKind.DELEGATED:
                dv = validate_delegation(policy, sub, admins)
                if not dv.authorized:
                    trace.append(TraceEntry(rid, policy.id, Decision.NOT_APPLICABLE, (), "unauthorized-delegation"))
                    continue
                chain = dv.chain
            else:
                chain = (policy.id,)
            decision, obligations = evaluate_policy(policy, sub, lookup)
            note = ";".join(lookup.failures) if decision is Decision.INDETERMINATE and lookup.failures else ""
            trace.append(TraceEntry(rid, policy.id, decision, chain, note))
            combined.append((policy.priority, decision))
            contributors.append((policy, obligations))
        decision, winners = combine_with_winners(combined, CombiningAlg.PRIORITY_OVERRIDE)
        if winners:
            winner, obligations = contributors[winners[0]]
            results[rid] = ResourceDecision(decision, obligations, winner.id)
        else:
            results[rid] = ResourceDecision(decision)
    return DecisionResponse(results, tuple(trace))

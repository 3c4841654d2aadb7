"""Multi-organization scenarios: load, run scripted requests, probe trust.

Scenario document (canonical format)::

    {"name": ..., "seed": ..., "clock": <int>,
     "keys": [principal ids whose keys derive from the seed],
     "federations": [{"id": "F1", "members": [broker ids], "edges": [[validator, issuer], ...]}],
     "organizations": [{"id", "broker", "gateway", "pdp_root", "providers": {...},
                        "policies": [policy bodies], "services": [resource ids],
                        "signed_paths": [...], "bundle": optional bundle document}],
     "adaptation": [{"id", "org", "trigger", "threshold", "action"}],
     "script": [{"id", "client", "target", "subject", "action", "resource", "context"}]}

An edge ``[V, I]`` means broker V accepts tokens issued by broker I.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from soasec.broker import BrokerError, Credential, FederationContext, FederationSelector, IdentityBroker
from soasec.broker import InvalidSpec, PartnerDescriptor, ProviderConfig, TokenRequest
from soasec.core.audit import AuditEvent, EventLog, EventType, FrozenClock
from soasec.core.canonical import CanonicalizationError, canonicalize, parse
from soasec.core.crypto import KeyRegistry, derive_keypair
from soasec.core.model import EndpointReference
from soasec.gateway import (
    ECP,
    IRP,
    USP,
    ActionType,
    GatewayInstance,
    InvalidBundle,
    KeyStore,
    Message,
    PolicyBundle,
    ServiceDirectory,
    Step,
    UtilitySpec,
)
from soasec.harness.adaptation import AdaptationEngine, AdaptationRule
from soasec.pdp import PDP, AuthzPolicy, PapError, PolicyStore, SchemaError, TargetMatcher, load_policy

DEFAULT_CLOCK = 1_700_000_000
DEFAULT_SIGNED_PATHS = ("/body/request",)


class ScenarioError(Exception):
    """A scenario document is malformed or references something undeclared."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass(frozen=True)
class SimulatedService:
    resource_id: str

    def handle(self, msg: Message) -> dict[str, Any]:
        return {"echo": msg.body, "resource": self.resource_id}


@dataclass
class Organization:
    id: str
    broker: IdentityBroker
    gateway: GatewayInstance
    pdp: PDP
    store: PolicyStore
    services: dict[str, SimulatedService]
    credentials: dict[str, str]
    directory: ServiceDirectory


@dataclass(frozen=True)
class ScriptStep:
    id: str
    client: str
    target: str
    subject: str
    action: str
    resource: str
    context: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "client": self.client,
            "context": self.context,
            "id": self.id,
            "resource": self.resource,
            "subject": self.subject,
            "target": self.target,
        }


@dataclass(frozen=True)
class Transcript:
    request: ScriptStep
    records: tuple[dict[str, Any], ...]
    outcome: str  # delivered | rejected
    stage: str = ""  # where it stopped: client, target, service
    reason: str = ""

    @property
    def delivered(self) -> bool:
        return self.outcome == "delivered"

    def actions(self) -> list[str]:
        """The successful milestones, e.g. insert-token, sign-elements, ..., deliver."""
        out = []
        for r in self.records:
            if r["kind"] == "step" and r["status"] == "ok":
                out.append(r["action"])
            elif r["kind"] == "deliver":
                out.append("deliver")
        return out

    def events(self, event_type: EventType | str | None = None) -> list[dict[str, Any]]:
        wanted = EventType(event_type).value if event_type is not None else None
        return [r for r in self.records if r["kind"] == "event" and (wanted is None or r["type"] == wanted)]

    def to_lines(self) -> bytes:
        return b"".join(canonicalize(r) + b"\n" for r in self.records)

    @classmethod
    def from_lines(cls, data: bytes) -> list[dict[str, Any]]:
        return [parse(line) for line in data.splitlines() if line]


@dataclass(frozen=True)
class TrustMatrix:
    context: str
    brokers: tuple[str, ...]
    cells: Mapping[tuple[str, str], bool]  # (issuer, validator) -> accepted

    def accepts(self, validator: str) -> list[str]:
        return [i for i in self.brokers if self.cells[(i, validator)]]

    def to_doc(self) -> dict[str, Any]:
        return {
            "accepts": {v: self.accepts(v) for v in self.brokers},
            "brokers": list(self.brokers),
            "context": self.context,
            "matrix": {i: {v: self.cells[(i, v)] for v in self.brokers} for i in self.brokers},
        }

    def table(self) -> str:
        corner = "issuer \\ validator"
        width = max([len(corner)] + [len(b) for b in self.brokers])
        cols = [max(3, len(b)) for b in self.brokers]
        rows = [corner.ljust(width) + "  " + "  ".join(b.ljust(c) for b, c in zip(self.brokers, cols))]
        for i in self.brokers:
            cells = ["yes".ljust(c) if self.cells[(i, v)] else "no".ljust(c) for v, c in zip(self.brokers, cols)]
            rows.append((i.ljust(width) + "  " + "  ".join(cells)).rstrip())
        return "\n".join(rows)


def standard_bundle(org_id: str, signed_paths: Iterable[str] = DEFAULT_SIGNED_PATHS) -> PolicyBundle:
    """Egress: get a token and sign. Ingress: validate, verify, authorize, route to the service."""
    paths = list(signed_paths)
    egress = ECP(
        "egress",
        (
            Step(ActionType.INSERT_TOKEN, {}),
            Step(ActionType.SIGN_ELEMENTS, {"paths": paths}),
        ),
        TargetMatcher.of(("direction", "equals", "outbound")),
    )
    ingress = ECP(
        "ingress",
        (
            Step(ActionType.VALIDATE_TOKEN, {}),
            Step(ActionType.VERIFY_ELEMENTS, {"paths": paths}),
            Step(ActionType.AUTHORIZE, {}),
            Step(ActionType.ROUTE, {"next_hop": f"inproc://{org_id}/service"}),
        ),
        TargetMatcher.of(("direction", "equals", "inbound")),
    )
    return PolicyBundle("standard", (egress, ingress), IRP.standard(sts="sts", pdp="pdp", keystore="keystore"), org_usp(org_id))


def org_usp(org_id: str) -> USP:
    return USP(
        {
            "sts": UtilitySpec(EndpointReference(f"inproc://{org_id}/sts"), "sts"),
            "pdp": UtilitySpec(EndpointReference(f"inproc://{org_id}/pdp"), "pdp"),
            "keystore": UtilitySpec(EndpointReference(f"inproc://{org_id}/keystore"), "keystore"),
        }
    )


def _need(doc: Mapping[str, Any], key: str, kind: type, where: str) -> Any:
    if key not in doc:
        raise ScenarioError(where, f"missing {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is int:
        raise ScenarioError(f"{where}.{key}", f"expected {kind.__name__}")
    return value


class Scenario:
    def __init__(self, doc: Mapping[str, Any]):
        if not isinstance(doc, Mapping):
            raise ScenarioError("$", "a scenario is an object")
        self.doc = doc
        self.name = str(doc.get("name", "scenario"))
        self.seed = str(doc.get("seed", self.name))
        self.clock = FrozenClock(doc.get("clock", DEFAULT_CLOCK))
        self.events = EventLog(self.clock)
        self._capture = threading.local()
        self.events.subscribe(self._record)
        self.keys = self._load_keys(doc)
        self.registry = KeyRegistry({p: k.public for p, k in self.keys.items()})
        self.orgs: dict[str, Organization] = {}
        self.federations: dict[str, dict[str, Any]] = {}
        org_docs = _need(doc, "organizations", list, "$")
        self._check_orgs(org_docs)
        fed_docs = doc.get("federations", [])
        if not isinstance(fed_docs, list):
            raise ScenarioError("$.federations", "expected a list")
        self._load_federations(fed_docs, org_docs)
        for i, od in enumerate(org_docs):
            self._load_org(od, f"$.organizations[{i}]")
        self.engine = self._load_adaptation(doc.get("adaptation", []))
        self.script = self._load_script(doc.get("script", []))

    # -- loading -----------------------------------------------------------------------

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            doc = parse(Path(path).read_bytes())
        except CanonicalizationError as exc:
            raise ScenarioError(str(path), str(exc)) from exc
        return cls(doc)

    def _load_keys(self, doc: Mapping[str, Any]) -> dict[str, Any]:
        keys = doc.get("keys", [])
        if not isinstance(keys, list) or not all(isinstance(k, str) for k in keys):
            raise ScenarioError("$.keys", "expected a list of principal ids")
        if len(set(keys)) != len(keys):
            raise ScenarioError("$.keys", "duplicate principal")
        return {p: derive_keypair(self.seed.encode(), p) for p in keys}

    def _key(self, principal: str, where: str):
        if principal not in self.keys:
            raise ScenarioError(where, f"undeclared key {principal!r}")
        return self.keys[principal]

    def _check_orgs(self, org_docs: list) -> None:
        seen: dict[str, str] = {}
        for i, od in enumerate(org_docs):
            where = f"$.organizations[{i}]"
            if not isinstance(od, dict):
                raise ScenarioError(where, "expected an object")
            for key in ("id", "broker", "gateway", "pdp_root"):
                value = _need(od, key, str, where)
                if key != "pdp_root" and value in seen:
                    raise ScenarioError(f"{where}.{key}", f"{value!r} already names {seen[value]}")
                seen.setdefault(value, f"{where}.{key}")
            self._key(od["broker"], f"{where}.broker")
            self._key(od["pdp_root"], f"{where}.pdp_root")

    def _load_federations(self, fed_docs: list, org_docs: list) -> None:
        brokers = {od["broker"] for od in org_docs}
        for i, fd in enumerate(fed_docs):
            where = f"$.federations[{i}]"
            if not isinstance(fd, dict):
                raise ScenarioError(where, "expected an object")
            fid = _need(fd, "id", str, where)
            if fid in self.federations:
                raise ScenarioError(f"{where}.id", f"federation {fid!r} declared twice")
            edges = fd.get("edges", [])
            if not isinstance(edges, list):
                raise ScenarioError(f"{where}.edges", "expected a list")
            for j, e in enumerate(edges):
                if not (isinstance(e, list) and len(e) == 2 and all(isinstance(b, str) for b in e)):
                    raise ScenarioError(f"{where}.edges[{j}]", "an edge is [validator, issuer]")
                for b in e:
                    if b not in brokers:
                        raise ScenarioError(f"{where}.edges[{j}]", f"undeclared broker {b!r}")
            members = fd.get("members")
            if members is None:
                members = sorted({b for e in edges for b in e})
            for j, m in enumerate(members):
                if m not in brokers:
                    raise ScenarioError(f"{where}.members[{j}]", f"undeclared broker {m!r}")
            pairs = []
            for j, e in enumerate(edges):
                for b in e:
                    if b not in members:
                        raise ScenarioError(f"{where}.edges[{j}]", f"{b!r} is not a member of {fid}")
                pairs.append((e[0], e[1]))
            self.federations[fid] = {"members": list(members), "edges": pairs, "selector": fd.get("selector", fid)}

    def _load_org(self, od: Mapping[str, Any], where: str) -> None:
        oid, bid = od["id"], od["broker"]
        providers_doc = od.get("providers", {})
        try:
            providers = ProviderConfig.from_doc(providers_doc)
        except (InvalidSpec, ValueError) as exc:
            raise ScenarioError(f"{where}.providers", str(exc)) from exc
        credentials = {d["subject"]: d["secret"] for d in providers_doc.get("identities", []) if "secret" in d}
        broker = IdentityBroker(
            bid, self.keys[bid], self.registry, self.clock, self.events, seed=f"{self.seed}/{bid}".encode()
        )
        for fid, fed in sorted(self.federations.items()):
            if bid not in fed["members"]:
                continue
            partners = tuple(PartnerDescriptor(i) for v, i in fed["edges"] if v == bid and i != bid)
            try:
                broker.add_context(FederationContext(fid, FederationSelector.from_doc(fed["selector"]), partners, providers))
            except BrokerError as exc:
                raise ScenarioError(f"{where}.broker", str(exc)) from exc

        root = od["pdp_root"]
        store = PolicyStore(KeyRegistry({root: self.keys[root].public}), [root], self.clock)
        for j, body in enumerate(od.get("policies", [])):
            try:
                policy = AuthzPolicy.from_body(body)
                load_policy(store, policy.sign(root, self.keys[root].private))
            except (SchemaError, PapError, ValueError) as exc:
                raise ScenarioError(f"{where}.policies[{j}]", str(exc)) from exc
        pdp = PDP(store, clock=self.clock, events=self.events, origin=f"{oid}/pdp")

        directory = ServiceDirectory(
            {
                f"inproc://{oid}/sts": broker,
                f"inproc://{oid}/pdp": pdp,
                f"inproc://{oid}/keystore": KeyStore.derived(f"{self.seed}/{oid}".encode(), ["k1", "k2"]),
            }
        )
        gateway = GatewayInstance(od["gateway"], directory, self.events, self.clock)
        try:
            if "bundle" in od:
                bundle = PolicyBundle.from_doc(od["bundle"])
            else:
                bundle = standard_bundle(oid, od.get("signed_paths", DEFAULT_SIGNED_PATHS))
            gateway.load(bundle)
        except (InvalidBundle, SchemaError, ValueError) as exc:
            raise ScenarioError(f"{where}.bundle", str(exc)) from exc
        gateway.activate()
        gateway.step_listeners.append(self._on_step)
        services = od.get("services", [])
        if not isinstance(services, list) or not all(isinstance(s, str) for s in services):
            raise ScenarioError(f"{where}.services", "expected a list of resource ids")
        self.orgs[oid] = Organization(
            oid, broker, gateway, pdp, store, {s: SimulatedService(s) for s in services}, credentials, directory
        )

    def _load_adaptation(self, docs: Any) -> AdaptationEngine:
        if not isinstance(docs, list):
            raise ScenarioError("$.adaptation", "expected a list")
        rules, blockers = [], {}
        for i, d in enumerate(docs):
            where = f"$.adaptation[{i}]"
            org = self.orgs.get(_need(d, "org", str, where))
            if org is None:
                raise ScenarioError(f"{where}.org", f"undeclared organization {d['org']!r}")
            try:
                rule = AdaptationRule(
                    _need(d, "id", str, where),
                    d.get("trigger", "invalid-claims"),
                    _need(d, "threshold", int, where),
                    _need(d, "action", str, where),
                    d.get("origin", org.gateway.id),
                )
            except ValueError as exc:
                raise ScenarioError(where, str(exc)) from exc
            rules.append(rule)
            blockers[rule.id] = org.gateway
        try:
            engine = AdaptationEngine(rules, self.events, "adaptation")
        except ValueError as exc:
            raise ScenarioError("$.adaptation", str(exc)) from exc
        rule_org = blockers

        def block(issuer: str, context: str) -> None:
            # the engine fires rules one at a time; the firing rule's org does the blocking
            rule_org[engine.firings[-1].rule_id].block(issuer, context)

        engine.block = block
        engine.attach(self.events)
        return engine

    def _load_script(self, docs: Any) -> list[ScriptStep]:
        if not isinstance(docs, list):
            raise ScenarioError("$.script", "expected a list")
        steps, ids = [], set()
        for i, d in enumerate(docs):
            where = f"$.script[{i}]"
            if not isinstance(d, dict):
                raise ScenarioError(where, "expected an object")
            fields = {k: _need(d, k, str, where) for k in ("client", "target", "subject", "action", "resource", "context")}
            sid = str(d.get("id", f"r{i + 1}"))
            if sid in ids:
                raise ScenarioError(f"{where}.id", f"step id {sid!r} used twice")
            ids.add(sid)
            for k in ("client", "target"):
                if fields[k] not in self.orgs:
                    raise ScenarioError(f"{where}.{k}", f"undeclared organization {fields[k]!r}")
            if fields["subject"] not in self.orgs[fields["client"]].credentials:
                raise ScenarioError(f"{where}.subject", f"{fields['subject']!r} is not a subject of {fields['client']}")
            if fields["resource"] not in self.orgs[fields["target"]].services:
                raise ScenarioError(f"{where}.resource", f"{fields['target']} hosts no {fields['resource']!r}")
            if fields["context"] not in self.federations:
                raise ScenarioError(f"{where}.context", f"undeclared federation {fields['context']!r}")
            steps.append(ScriptStep(sid, **fields))
        return steps

    # -- introspection -------------------------------------------------------------------

    def trust_edges(self, context: Optional[str] = None) -> list[tuple[str, str]]:
        """Installed acceptance edges (validator, issuer), self-trust excluded."""
        out = []
        for org in self.orgs.values():
            for fid, ctx in org.broker.contexts.items():
                if context is not None and fid != context:
                    continue
                out.extend((org.broker.broker_id, p.partner_id) for p in ctx.partners)
        return sorted(set(out))

    def org_of_broker(self, broker_id: str) -> Organization:
        for org in self.orgs.values():
            if org.broker.broker_id == broker_id:
                return org
        raise KeyError(broker_id)

    # -- running ---------------------------------------------------------------------------

    def _record(self, event: AuditEvent) -> None:
        sink = getattr(self._capture, "records", None)
        if sink is not None:
            sink.append(
                {
                    "context": event.context_id,
                    "kind": "event",
                    "origin": event.origin,
                    "payload": dict(event.payload),
                    "type": event.event_type.value,
                    "wall": event.wall,
                }
            )

    def _on_step(self, t, msg: Message) -> None:
        sink = getattr(self._capture, "records", None)
        if sink is None:
            return
        rec = {
            "action": t.action,
            "ecp": t.ecp,
            "gateway": t.node,
            "index": t.index,
            "kind": "step",
            "reason": t.reason,
            "stage": self._capture.stage,
            "status": t.status,
        }
        if t.action == "authorize" and "decision" in msg.annotations:
            rec["decision"] = dict(msg.annotations["decision"])
        sink.append(rec)

    def run_request(
        self,
        client: str,
        subject: str,
        action: str,
        resource: str,
        target: str,
        context: str,
        request_id: str = "",
    ) -> Transcript:
        step = ScriptStep(request_id or f"{client}->{target}:{resource}", client, target, subject, action, resource, context)
        return self.run_step(step)

    def run_step(self, step: ScriptStep) -> Transcript:
        records: list[dict[str, Any]] = [{"kind": "request", **step.to_doc()}]
        self._capture.records = records
        try:
            outcome, stage, reason = self._pipeline(step, records)
        finally:
            self._capture.records = None
        records.append({"kind": "outcome", "outcome": outcome, "reason": reason, "stage": stage})
        return Transcript(step, tuple(records), outcome, stage, reason)

    def _pipeline(self, step: ScriptStep, records: list[dict[str, Any]]) -> tuple[str, str, str]:
        client, target = self.orgs[step.client], self.orgs[step.target]
        self._capture.stage = "client"
        msg = Message(
            "outbound",
            {
                "action": step.action,
                "context-reference": step.context,
                "correlation-id": step.id,
                "resource": step.resource,
            },
            {"request": {"action": step.action, "resource": step.resource, "subject": step.subject}},
        )
        secret = client.credentials.get(step.subject)
        if secret is not None:
            msg.annotations["credential"] = {"scheme": "shared-secret", "secret": secret, "subject": step.subject}
        out = client.gateway.process(msg)
        if not out.forwarded:
            return "rejected", "client", out.reason
        wire = out.message.forwarded("inbound")
        records.append({"kind": "forward", "from": client.gateway.id, "to": target.gateway.id})
        self._capture.stage = "target"
        got = target.gateway.process(wire)
        if not got.forwarded:
            return "rejected", "target", got.reason
        service = target.services.get(step.resource)
        if service is None:
            return "rejected", "service", "no-such-service"
        records.append({"kind": "deliver", "resource": step.resource, "response": service.handle(got.message)})
        return "delivered", "service", ""

    def run_script(self, until: Optional[str] = None, concurrent: bool = False) -> list[Transcript]:
        steps = list(self.script)
        if until is not None:
            ids = [s.id for s in steps]
            if until not in ids:
                raise ScenarioError("--until", f"no script step {until!r}")
            steps = steps[: ids.index(until) + 1]
        if not concurrent:
            return [self.run_step(s) for s in steps]
        with ThreadPoolExecutor(max_workers=4) as pool:
            return list(pool.map(self.run_step, steps))

    # -- trust probing -------------------------------------------------------------------------

    def validity_matrix(self, context: str) -> TrustMatrix:
        """Each member broker issues a fresh token for one of its own subjects; every member validates it."""
        if context not in self.federations:
            raise ScenarioError("--matrix", f"undeclared federation {context!r}")
        brokers = tuple(sorted(self.federations[context]["members"]))
        cells = {}
        for issuer in brokers:
            org = self.org_of_broker(issuer)
            token = None
            if org.credentials:
                subject = sorted(org.credentials)[0]
                try:
                    cred = Credential.shared_secret(subject, org.credentials[subject])
                    token = org.broker.issue_token(TokenRequest.issue(context, cred)).token.to_bytes()
                except BrokerError:
                    token = None
            for validator in brokers:
                ok = False
                if token is not None:
                    ok = self.org_of_broker(validator).broker.validate_token(token, context).valid
                cells[(issuer, validator)] = ok
        return TrustMatrix(context, brokers, cells)


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.load(path)

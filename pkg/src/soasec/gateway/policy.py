"""The four enforcement policy types and the bundle that binds them.

ECP: which actions run, when, in what order, with which parameters.
IRP: which interceptor implementation executes each action type.
USP: static references to the external services actions may call.
CEP: what clients must do, derived from an ECP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional

from soasec.core.canonical import canonicalize
from soasec.core.model import EndpointReference
from soasec.pdp.model import SchemaError, TargetMatcher, validate_condition


class InvalidBundle(Exception):
    pass


class ActionType(str, Enum):
    VALIDATE_STRUCTURE = "validate-structure"
    INSERT_TOKEN = "insert-token"
    VALIDATE_TOKEN = "validate-token"
    AUTHORIZE = "authorize"
    SIGN_ELEMENTS = "sign-elements"
    VERIFY_ELEMENTS = "verify-elements"
    ENCRYPT_ELEMENTS = "encrypt-elements"
    DECRYPT_ELEMENTS = "decrypt-elements"
    TRANSFORM = "transform"
    ROUTE = "route"
    AUDIT_EMIT = "audit-emit"
    INVOKE_POLICY = "invoke-policy"


class Interface(str, Enum):
    STS = "sts"
    PDP = "pdp"
    KEYSTORE = "keystore"


# which external interface an action needs, if any
NEEDS: dict[ActionType, Interface] = {
    ActionType.INSERT_TOKEN: Interface.STS,
    ActionType.VALIDATE_TOKEN: Interface.STS,
    ActionType.AUTHORIZE: Interface.PDP,
    ActionType.ENCRYPT_ELEMENTS: Interface.KEYSTORE,
    ActionType.DECRYPT_ELEMENTS: Interface.KEYSTORE,
}


class EffectOp(str, Enum):
    SET = "set"
    INCR = "incr"


@dataclass(frozen=True)
class Effect:
    var: str
    op: EffectOp
    value: Any = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "op", EffectOp(self.op))

    def apply(self, state: dict[str, Any]) -> None:
        if self.op is EffectOp.SET:
            state[self.var] = self.value
        else:
            state[self.var] = state.get(self.var, 0) + self.value

    def to_doc(self) -> dict[str, Any]:
        return {"op": self.op.value, "value": self.value, "var": self.var}

    @classmethod
    def from_doc(cls, doc: Any) -> "Effect":
        return cls(doc["var"], doc["op"], doc.get("value", 1))


@dataclass(frozen=True)
class Step:
    action: ActionType
    params: Mapping[str, Any] = field(default_factory=dict)
    condition: Optional[dict[str, Any]] = None
    usp_ref: Optional[str] = None
    effects: tuple[Effect, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", ActionType(self.action))
        object.__setattr__(self, "effects", tuple(self.effects))
        if self.condition is not None:
            validate_condition(self.condition)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"action": self.action.value, "params": dict(self.params)}
        if self.condition is not None:
            doc["condition"] = self.condition
        if self.usp_ref is not None:
            doc["usp"] = self.usp_ref
        if self.effects:
            doc["effects"] = [e.to_doc() for e in self.effects]
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "Step":
        if not isinstance(doc, dict) or "action" not in doc:
            raise SchemaError(f"bad step {doc!r}")
        return cls(
            doc["action"],
            dict(doc.get("params", {})),
            doc.get("condition"),
            doc.get("usp"),
            tuple(Effect.from_doc(e) for e in doc.get("effects", [])),
        )


@dataclass(frozen=True)
class ECP:
    id: str
    steps: tuple[Step, ...] = ()
    predicate: TargetMatcher = field(default_factory=TargetMatcher)
    state: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def actions(self) -> set[ActionType]:
        return {s.action for s in self.steps}

    def to_doc(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "predicate": self.predicate.to_doc(),
            "state": dict(self.state),
            "steps": [s.to_doc() for s in self.steps],
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "ECP":
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise SchemaError("ECP needs an id")
        return cls(
            doc["id"],
            tuple(Step.from_doc(s) for s in doc.get("steps", [])),
            TargetMatcher.from_doc(doc.get("predicate", [])),
            dict(doc.get("state", {})),
        )


@dataclass(frozen=True)
class IRPEntry:
    implementation: str
    config: Mapping[str, Any] = field(default_factory=dict)
    usp_ref: Optional[str] = None

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"config": dict(self.config), "implementation": self.implementation}
        if self.usp_ref is not None:
            doc["usp"] = self.usp_ref
        return doc


@dataclass(frozen=True)
class IRP:
    entries: Mapping[ActionType, IRPEntry]

    def get(self, action: ActionType) -> Optional[IRPEntry]:
        return self.entries.get(ActionType(action))

    def to_doc(self) -> dict[str, Any]:
        return {a.value: e.to_doc() for a, e in self.entries.items()}

    @classmethod
    def from_doc(cls, doc: Any) -> "IRP":
        if not isinstance(doc, dict):
            raise SchemaError("IRP must be an object")
        return cls(
            {
                ActionType(a): IRPEntry(e["implementation"], dict(e.get("config", {})), e.get("usp"))
                for a, e in doc.items()
            }
        )

    @classmethod
    def standard(cls, **usp_refs: str) -> "IRP":
        """Map every action to its built-in implementation.

        ``usp_refs`` keyed by interface (sts, pdp, keystore) are embedded for
        the actions that need them.
        """
        entries = {}
        for a in ActionType:
            need = NEEDS.get(a)
            entries[a] = IRPEntry(f"std/{a.value}", {}, usp_refs.get(need.value) if need else None)
        return cls(entries)


@dataclass(frozen=True)
class UtilitySpec:
    endpoint: EndpointReference
    interface: Interface
    timeout: float = 0.0
    retries: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "interface", Interface(self.interface))
        if self.timeout < 0 or self.retries < 0:
            raise SchemaError("timeout and retries must be non-negative")

    def to_doc(self) -> dict[str, Any]:
        return {
            "endpoint": self.endpoint.to_doc(),
            "interface": self.interface.value,
            "retries": self.retries,
            "timeout": self.timeout,
        }


@dataclass(frozen=True)
class USP:
    refs: Mapping[str, UtilitySpec] = field(default_factory=dict)

    def to_doc(self) -> dict[str, Any]:
        return {k: v.to_doc() for k, v in self.refs.items()}

    @classmethod
    def from_doc(cls, doc: Any) -> "USP":
        if not isinstance(doc, dict):
            raise SchemaError("USP must be an object")
        return cls(
            {
                k: UtilitySpec(
                    EndpointReference.from_doc(v["endpoint"]),
                    v["interface"],
                    float(v.get("timeout", 0.0)),
                    int(v.get("retries", 0)),
                )
                for k, v in doc.items()
            }
        )


@dataclass(frozen=True)
class PolicyBundle:
    version: str
    ecps: tuple[ECP, ...]
    irp: IRP
    usp: USP = field(default_factory=USP)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ecps", tuple(sorted(self.ecps, key=lambda e: e.id)))

    def ecp(self, ecp_id: str) -> Optional[ECP]:
        for e in self.ecps:
            if e.id == ecp_id:
                return e
        return None

    def to_doc(self) -> dict[str, Any]:
        return {
            "ecps": [e.to_doc() for e in self.ecps],
            "irp": self.irp.to_doc(),
            "usp": self.usp.to_doc(),
            "version": self.version,
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "PolicyBundle":
        try:
            return cls(
                str(doc["version"]),
                tuple(ECP.from_doc(e) for e in doc["ecps"]),
                IRP.from_doc(doc["irp"]),
                USP.from_doc(doc.get("usp", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidBundle(f"malformed bundle: {exc}") from exc


# -- capability exposure ---------------------------------------------------------


class AssertionKind(str, Enum):
    TOKEN = "token"
    SIGN = "sign"
    ENCRYPT = "encrypt"
    SCHEMA = "schema"


DUALS: dict[ActionType, AssertionKind] = {
    ActionType.VALIDATE_TOKEN: AssertionKind.TOKEN,
    ActionType.VERIFY_ELEMENTS: AssertionKind.SIGN,
    ActionType.DECRYPT_ELEMENTS: AssertionKind.ENCRYPT,
    ActionType.VALIDATE_STRUCTURE: AssertionKind.SCHEMA,
}

# the client-visible part of each dual step's parameters
_PUBLIC_PARAMS: dict[AssertionKind, tuple[str, ...]] = {
    AssertionKind.TOKEN: ("context", "issuers", "token_type"),
    AssertionKind.SIGN: ("paths",),
    AssertionKind.ENCRYPT: ("paths", "key", "transform"),
    AssertionKind.SCHEMA: ("schema",),
}


@dataclass(frozen=True)
class Assertion:
    id: str
    kind: AssertionKind
    requirement: Mapping[str, Any]
    order: int

    def to_doc(self) -> dict[str, Any]:
        return {"id": self.id, "kind": self.kind.value, "order": self.order, "requirement": dict(self.requirement)}

    @classmethod
    def from_doc(cls, doc: Any) -> "Assertion":
        return cls(doc["id"], AssertionKind(doc["kind"]), dict(doc["requirement"]), int(doc["order"]))


@dataclass(frozen=True)
class CEP:
    id: str
    assertions: tuple[Assertion, ...]

    def to_doc(self) -> dict[str, Any]:
        return {"assertions": [a.to_doc() for a in self.assertions], "id": self.id}

    def to_bytes(self) -> bytes:
        return canonicalize(self.to_doc())

    @classmethod
    def from_doc(cls, doc: Any) -> "CEP":
        return cls(doc["id"], tuple(Assertion.from_doc(a) for a in doc["assertions"]))


def assertion_id(ecp_id: str, step_index: int) -> str:
    return f"{ecp_id}#{step_index}"


def derive_cep(ecp: ECP) -> CEP:
    """Publish one assertion per step that has a client-visible dual.

    Only the public parameters of those steps are copied, so interceptor
    ids, USP references and endpoints never leak.
    """
    out = []
    for i, step in enumerate(ecp.steps):
        kind = DUALS.get(step.action)
        if kind is None:
            continue
        requirement = {k: step.params[k] for k in _PUBLIC_PARAMS[kind] if k in step.params}
        out.append(Assertion(assertion_id(ecp.id, i), kind, requirement, len(out)))
    return CEP(ecp.id, tuple(out))


SCHEMA_DEFAULTS = {"string": "", "integer": 0, "boolean": False, "object": {}}


def client_ecp(
    cep: CEP,
    *,
    sts_ref: str = "sts",
    keystore_ref: str = "keystore",
    context: Optional[str] = None,
    omit: frozenset[str] = frozenset(),
    ecp_id: Optional[str] = None,
) -> ECP:
    """Build the client-side ECP that satisfies ``cep``.

    The token is obtained first; element operations then run in reverse
    order of the provider's checks, so each provider step meets exactly the
    state the matching client step produced. ``omit`` drops assertions by id.
    """
    steps: list[Step] = []
    kept = [a for a in cep.assertions if a.id not in omit]
    for a in kept:
        if a.kind is AssertionKind.TOKEN:
            params = {"context": a.requirement.get("context") or context}
            if params["context"] is None:
                raise ValueError("CEP names no context and none was given")
            if "token_type" in a.requirement:
                params["token_type"] = a.requirement["token_type"]
            steps.append(Step(ActionType.INSERT_TOKEN, params, usp_ref=sts_ref))
            break
    for a in sorted(kept, key=lambda a: -a.order):
        r = a.requirement
        if a.kind is AssertionKind.SIGN:
            steps.append(Step(ActionType.SIGN_ELEMENTS, {"paths": list(r["paths"])}))
        elif a.kind is AssertionKind.ENCRYPT:
            params = {k: r[k] for k in ("paths", "key", "transform") if k in r}
            steps.append(Step(ActionType.ENCRYPT_ELEMENTS, params, usp_ref=keystore_ref))
        elif a.kind is AssertionKind.SCHEMA:
            schema = r["schema"]
            types = schema.get("types", {})
            ensure = {p: SCHEMA_DEFAULTS[types.get(p, "string")] for p in schema.get("required", [])}
            steps.append(Step(ActionType.TRANSFORM, {"ensure": ensure}))
    return ECP(ecp_id or f"client:{cep.id}", tuple(steps))

"""Policy, request and response types for the authorization decision point."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Sequence

from soasec.core.model import Attribute, Category, SignedDocument


class SchemaError(ValueError):
    """A policy or request document does not have the expected structure."""


class Decision(str, Enum):
    PERMIT = "Permit"
    DENY = "Deny"
    NOT_APPLICABLE = "NotApplicable"
    INDETERMINATE = "Indeterminate"


class CombiningAlg(str, Enum):
    DENY_OVERRIDES = "deny-overrides"
    PERMIT_OVERRIDES = "permit-overrides"
    FIRST_APPLICABLE = "first-applicable"
    PRIORITY_OVERRIDE = "priority-override"


class PolicyKind(str, Enum):
    ROOT = "root"
    DELEGATED = "delegated"
    ADMINISTRATIVE = "administrative"


class MatchOp(str, Enum):
    EQUALS = "equals"
    PREFIX = "prefix"
    ANY_OF = "any-of"
    RANGE = "range"


def same_value(a: Any, b: Any) -> bool:
    # bool is an int subclass; True must not equal 1 here.
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    return a == b


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# -- targets -----------------------------------------------------------------


@dataclass(frozen=True)
class Clause:
    attribute_id: str
    op: MatchOp
    value: Any

    def __post_init__(self) -> None:
        object.__setattr__(self, "op", MatchOp(self.op))
        if self.op is MatchOp.ANY_OF:
            if not isinstance(self.value, (list, tuple)):
                raise SchemaError("any-of needs a list of values")
            object.__setattr__(self, "value", tuple(self.value))
        elif self.op is MatchOp.RANGE:
            if not isinstance(self.value, (list, tuple)) or len(self.value) != 2:
                raise SchemaError("range needs [low, high]")
            lo, hi = self.value
            if (lo is not None and not _is_number(lo)) or (hi is not None and not _is_number(hi)):
                raise SchemaError("range bounds must be numbers or null")
            object.__setattr__(self, "value", (lo, hi))
        elif self.op is MatchOp.PREFIX and not isinstance(self.value, str):
            raise SchemaError("prefix needs a string")

    def matches_value(self, v: Any) -> bool:
        if self.op is MatchOp.EQUALS:
            return same_value(v, self.value)
        if self.op is MatchOp.PREFIX:
            return isinstance(v, str) and v.startswith(self.value)
        if self.op is MatchOp.ANY_OF:
            return any(same_value(v, x) for x in self.value)
        lo, hi = self.value
        return _is_number(v) and (lo is None or lo <= v) and (hi is None or v <= hi)

    def implies(self, other: "Clause") -> bool:
        """True if every value this clause accepts is accepted by ``other``.

        Syntactic containment per operator pair; anything not provably
        contained answers False.
        """
        if self.attribute_id != other.attribute_id:
            return False
        if self.op is MatchOp.ANY_OF:
            return all(other.matches_value(v) for v in self.value)
        if self.op is MatchOp.EQUALS:
            return other.matches_value(self.value)
        if self.op is MatchOp.PREFIX:
            return other.op is MatchOp.PREFIX and self.value.startswith(other.value)
        # self is a range
        lo, hi = self.value
        if lo is not None and hi is not None and lo > hi:
            return True  # empty range
        if other.op is MatchOp.RANGE:
            olo, ohi = other.value
            lo_ok = olo is None or (lo is not None and olo <= lo)
            hi_ok = ohi is None or (hi is not None and hi <= ohi)
            return lo_ok and hi_ok
        if lo is not None and lo == hi:
            return other.matches_value(lo)
        return False

    def to_doc(self) -> list[Any]:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return [self.attribute_id, self.op.value, value]

    @classmethod
    def from_doc(cls, doc: Any) -> "Clause":
        if not isinstance(doc, (list, tuple)) or len(doc) != 3 or not isinstance(doc[0], str):
            raise SchemaError(f"bad target clause {doc!r}")
        try:
            return cls(doc[0], MatchOp(doc[1]), doc[2])
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


@dataclass(frozen=True)
class TargetMatcher:
    """Conjunction of clauses; the empty matcher matches every request."""

    clauses: tuple[Clause, ...] = ()

    def attribute_ids(self) -> set[str]:
        return {c.attribute_id for c in self.clauses}

    def subsumes(self, other: "TargetMatcher") -> bool:
        """Whether every request matched by ``other`` is matched by ``self``."""
        return all(any(o.implies(s) for o in other.clauses) for s in self.clauses)

    def to_doc(self) -> list[Any]:
        return [c.to_doc() for c in self.clauses]

    @classmethod
    def from_doc(cls, doc: Any) -> "TargetMatcher":
        if doc is None:
            return cls()
        if not isinstance(doc, list):
            raise SchemaError("target must be a list of clauses")
        return cls(tuple(Clause.from_doc(c) for c in doc))

    @classmethod
    def of(cls, *clauses: tuple[str, str, Any]) -> "TargetMatcher":
        return cls(tuple(Clause(a, MatchOp(op), v) for a, op, v in clauses))


# -- conditions --------------------------------------------------------------

COMPARISONS = ("eq", "ne", "lt", "le", "gt", "ge", "prefix", "in", "present")


def validate_condition(doc: Any) -> None:
    if not isinstance(doc, dict) or len(doc) == 0:
        raise SchemaError(f"bad condition {doc!r}")
    if "and" in doc or "or" in doc:
        key = "and" if "and" in doc else "or"
        if set(doc) != {key} or not isinstance(doc[key], list):
            raise SchemaError(f"bad {key} condition")
        for sub in doc[key]:
            validate_condition(sub)
    elif "not" in doc:
        if set(doc) != {"not"}:
            raise SchemaError("bad not condition")
        validate_condition(doc["not"])
    else:
        op = doc.get("cmp")
        if op not in COMPARISONS or not isinstance(doc.get("attr"), str):
            raise SchemaError(f"bad comparison {doc!r}")
        if op != "present" and "value" not in doc:
            raise SchemaError("comparison needs a value")


def condition_attribute_ids(doc: Any) -> set[str]:
    if doc is None:
        return set()
    if "and" in doc or "or" in doc:
        out: set[str] = set()
        for sub in doc.get("and", doc.get("or", [])):
            out |= condition_attribute_ids(sub)
        return out
    if "not" in doc:
        return condition_attribute_ids(doc["not"])
    return {doc["attr"]}


def _compare(op: str, v: Any, ref: Any) -> bool:
    if op == "eq":
        return same_value(v, ref)
    if op == "ne":
        return not same_value(v, ref)
    if op == "prefix":
        if not isinstance(v, str) or not isinstance(ref, str):
            raise TypeError("prefix on non-string")
        return v.startswith(ref)
    if op == "in":
        return any(same_value(v, x) for x in ref)
    if isinstance(v, bool) or isinstance(ref, bool) or type(v) is not type(ref) and not (
        _is_number(v) and _is_number(ref)
    ):
        raise TypeError(f"cannot order {v!r} and {ref!r}")
    return {"lt": v < ref, "le": v <= ref, "gt": v > ref, "ge": v >= ref}[op]


def eval_condition(doc: Any, lookup: Callable[[str], Sequence[Any]]) -> Optional[bool]:
    """Three-valued evaluation; None stands for Indeterminate.

    A comparison over a missing attribute is Indeterminate, except ``present``
    which simply answers False.
    """
    if "and" in doc:
        results = [eval_condition(sub, lookup) for sub in doc["and"]]
        if False in results:
            return False
        return None if None in results else True
    if "or" in doc:
        results = [eval_condition(sub, lookup) for sub in doc["or"]]
        if True in results:
            return True
        return None if None in results else False
    if "not" in doc:
        inner = eval_condition(doc["not"], lookup)
        return None if inner is None else not inner
    values = lookup(doc["attr"])
    if doc["cmp"] == "present":
        return bool(values)
    if not values:
        return None
    try:
        return any(_compare(doc["cmp"], v, doc["value"]) for v in values)
    except TypeError:
        return None


# -- rules and policies ------------------------------------------------------


@dataclass(frozen=True)
class Obligation:
    id: str
    parameters: dict[str, str] = field(default_factory=dict)
    cep_assertion_ref: Optional[str] = None

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.id, "parameters": dict(self.parameters)}
        if self.cep_assertion_ref is not None:
            doc["cep_assertion_ref"] = self.cep_assertion_ref
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "Obligation":
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise SchemaError(f"bad obligation {doc!r}")
        params = doc.get("parameters", {})
        if not isinstance(params, dict) or not all(isinstance(v, str) for v in params.values()):
            raise SchemaError("obligation parameters must map to strings")
        return cls(doc["id"], dict(params), doc.get("cep_assertion_ref"))


@dataclass(frozen=True)
class Rule:
    id: str
    effect: Decision
    condition: Optional[dict[str, Any]] = None
    obligations: tuple[Obligation, ...] = ()

    def __post_init__(self) -> None:
        effect = Decision(self.effect)
        if effect not in (Decision.PERMIT, Decision.DENY):
            raise SchemaError("rule effect must be Permit or Deny")
        object.__setattr__(self, "effect", effect)
        if self.condition is not None:
            validate_condition(self.condition)
        object.__setattr__(self, "obligations", tuple(self.obligations))

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"effect": self.effect.value, "id": self.id}
        if self.condition is not None:
            doc["condition"] = self.condition
        if self.obligations:
            doc["obligations"] = [o.to_doc() for o in self.obligations]
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "Rule":
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise SchemaError(f"bad rule {doc!r}")
        try:
            return cls(
                doc["id"],
                Decision(doc.get("effect")),
                doc.get("condition"),
                tuple(Obligation.from_doc(o) for o in doc.get("obligations", [])),
            )
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


@dataclass(frozen=True)
class DelegationConstraint:
    allowed_attribute_ids: frozenset[str]
    allowed_combining_algs: frozenset[CombiningAlg]
    target_scope: TargetMatcher = TargetMatcher()
    max_chain_depth: int = 1

    def __post_init__(self) -> None:
        if self.max_chain_depth < 1:
            raise SchemaError("max_chain_depth must be >= 1")
        object.__setattr__(self, "allowed_attribute_ids", frozenset(self.allowed_attribute_ids))
        object.__setattr__(
            self,
            "allowed_combining_algs",
            frozenset(CombiningAlg(a) for a in self.allowed_combining_algs),
        )

    def to_doc(self) -> dict[str, Any]:
        return {
            "allowed_attribute_ids": sorted(self.allowed_attribute_ids),
            "allowed_combining_algs": sorted(a.value for a in self.allowed_combining_algs),
            "max_chain_depth": self.max_chain_depth,
            "target_scope": self.target_scope.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "DelegationConstraint":
        if not isinstance(doc, dict):
            raise SchemaError("delegation constraint must be an object")
        try:
            depth = doc.get("max_chain_depth", 1)
            if not isinstance(depth, int) or isinstance(depth, bool):
                raise SchemaError("max_chain_depth must be an integer")
            return cls(
                frozenset(doc.get("allowed_attribute_ids", [])),
                frozenset(CombiningAlg(a) for a in doc.get("allowed_combining_algs", [])),
                TargetMatcher.from_doc(doc.get("target_scope", [])),
                depth,
            )
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


@dataclass(frozen=True)
class AuthzPolicy:
    """An access or administrative policy.

    ``issuer`` is never part of the signed body: it is generated from the
    signature when a delegated/administrative policy is loaded and stays
    None for root policies.
    """

    id: str
    kind: PolicyKind
    priority: int = 0
    target: TargetMatcher = TargetMatcher()
    rules: tuple[Rule, ...] = ()
    combining_alg: CombiningAlg = CombiningAlg.DENY_OVERRIDES
    not_before: int = 0
    not_after: int = 2**53
    delegation: Optional[DelegationConstraint] = None
    issuer: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "combining_alg", CombiningAlg(self.combining_alg))
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.id:
            raise SchemaError("policy id must be non-empty")
        if self.not_before >= self.not_after:
            raise SchemaError("validity window must be non-empty")
        if self.kind is PolicyKind.ADMINISTRATIVE and self.delegation is None:
            raise SchemaError("administrative policy needs a delegation constraint")
        if self.kind is PolicyKind.DELEGATED and self.delegation is not None:
            raise SchemaError("delegated access policy cannot carry a delegation constraint")
        if self.delegation is not None and self.rules:
            raise SchemaError("administrative policies carry no access rules")
        ids = [r.id for r in self.rules]
        if len(ids) != len(set(ids)):
            raise SchemaError("duplicate rule id")

    @property
    def is_administrative(self) -> bool:
        return self.delegation is not None

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now < self.not_after

    def attribute_ids(self) -> set[str]:
        ids = self.target.attribute_ids()
        for rule in self.rules:
            ids |= condition_attribute_ids(rule.condition)
        return ids

    def body_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "combining_alg": self.combining_alg.value,
            "id": self.id,
            "kind": self.kind.value,
            "priority": self.priority,
            "rules": [r.to_doc() for r in self.rules],
            "target": self.target.to_doc(),
            "validity": {"not_after": self.not_after, "not_before": self.not_before},
        }
        if self.delegation is not None:
            doc["delegation"] = self.delegation.to_doc()
        return doc

    @classmethod
    def from_body(cls, doc: Any, issuer: Optional[str] = None) -> "AuthzPolicy":
        if not isinstance(doc, dict):
            raise SchemaError("policy body must be an object")
        allowed = {"combining_alg", "delegation", "id", "kind", "priority", "rules", "target", "validity"}
        extra = set(doc) - allowed
        if extra:
            raise SchemaError(f"unknown policy fields {sorted(extra)}")
        if not isinstance(doc.get("id"), str):
            raise SchemaError("policy id missing")
        validity = doc.get("validity", {})
        priority = doc.get("priority", 0)
        if not isinstance(priority, int) or isinstance(priority, bool):
            raise SchemaError("priority must be an integer")
        if not isinstance(validity, dict):
            raise SchemaError("validity must be an object")
        nb, na = validity.get("not_before", 0), validity.get("not_after", 2**53)
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in (nb, na)):
            raise SchemaError("validity bounds must be integers")
        rules = doc.get("rules", [])
        if not isinstance(rules, list):
            raise SchemaError("rules must be a list")
        try:
            return cls(
                id=doc["id"],
                kind=PolicyKind(doc.get("kind")),
                priority=priority,
                target=TargetMatcher.from_doc(doc.get("target", [])),
                rules=tuple(Rule.from_doc(r) for r in rules),
                combining_alg=CombiningAlg(doc.get("combining_alg", "deny-overrides")),
                not_before=nb,
                not_after=na,
                delegation=(
                    DelegationConstraint.from_doc(doc["delegation"]) if "delegation" in doc else None
                ),
                issuer=issuer,
            )
        except SchemaError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise SchemaError(str(exc)) from exc

    def sign(self, signer_id: str, signing_key: bytes) -> SignedDocument:
        return SignedDocument.create(self.body_doc(), signer_id, signing_key)


# -- requests and responses --------------------------------------------------


class RequestError(ValueError):
    """A decision request is malformed."""


@dataclass(frozen=True)
class DecisionRequest:
    attributes: tuple[Attribute, ...]
    resource_ids: tuple[str, ...]
    context_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "resource_ids", tuple(self.resource_ids))

    def values(self, attribute_id: str) -> list[Any]:
        return [a.value for a in self.attributes if a.id == attribute_id]

    def validate(self) -> None:
        if not self.resource_ids:
            raise RequestError("request names no resource")
        if not all(isinstance(r, str) and r for r in self.resource_ids):
            raise RequestError("resource ids must be non-empty strings")
        cats = {a.category for a in self.attributes}
        if Category.DELEGATE in cats:
            raise RequestError("delegate attributes are reserved for administrative requests")
        for needed in (Category.SUBJECT, Category.ACTION):
            if needed not in cats:
                raise RequestError(f"request lacks a {needed.value} attribute")

    def to_doc(self) -> dict[str, Any]:
        return {
            "attributes": [a.to_doc() for a in self.attributes],
            "context": self.context_id,
            "resources": list(self.resource_ids),
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "DecisionRequest":
        try:
            return cls(
                tuple(Attribute.from_doc(a) for a in doc["attributes"]),
                tuple(doc["resources"]),
                doc.get("context", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestError(f"malformed request: {exc}") from exc

    @classmethod
    def simple(
        cls,
        subject: str,
        action: str,
        resources: Iterable[str] | str,
        context_id: str = "",
        **extra: Any,
    ) -> "DecisionRequest":
        """Build a request from a subject id, an action id and resource ids.

        Extra keyword arguments become attributes; ``subject_role="x"`` maps to
        ``subject.role``.
        """
        from soasec.core.model import attr

        if isinstance(resources, str):
            resources = [resources]
        attrs = [attr("subject.id", subject), attr("action.id", action)]
        for key, value in extra.items():
            attr_id = key.replace("_", ".", 1).replace("_", "-")
            for v in value if isinstance(value, list) else [value]:
                attrs.append(attr(attr_id, v))
        return cls(tuple(attrs), tuple(resources), context_id)


@dataclass(frozen=True)
class TraceEntry:
    resource_id: str
    policy_id: str
    decision: Decision
    chain: tuple[str, ...] = ()
    note: str = ""

    def to_doc(self) -> dict[str, Any]:
        doc = {
            "chain": list(self.chain),
            "decision": self.decision.value,
            "policy": self.policy_id,
            "resource": self.resource_id,
        }
        if self.note:
            doc["note"] = self.note
        return doc


@dataclass(frozen=True)
class ResourceDecision:
    decision: Decision
    obligations: tuple[Obligation, ...] = ()
    winner: Optional[str] = None


@dataclass(frozen=True)
class DecisionResponse:
    results: dict[str, ResourceDecision]
    trace: tuple[TraceEntry, ...] = ()

    def decision(self, resource_id: str) -> Decision:
        return self.results[resource_id].decision

    @property
    def decisions(self) -> dict[str, Decision]:
        return {rid: r.decision for rid, r in self.results.items()}

    def to_doc(self) -> dict[str, Any]:
        return {
            "results": {
                rid: {
                    "decision": r.decision.value,
                    "obligations": [o.to_doc() for o in r.obligations],
                    "winner": r.winner,
                }
                for rid, r in self.results.items()
            },
            "trace": [t.to_doc() for t in self.trace],
        }

"""Federation contexts, identities, claims and tokens for the identity broker."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional

from soasec.core.canonical import CanonicalizationError
from soasec.core.crypto import b64d, b64e
from soasec.core.model import Attribute, SignedDocument
from soasec.pdp.model import Clause, Obligation


class BrokerError(Exception):
    """Base class for broker faults."""


class FederationNotFound(BrokerError):
    pass


class AmbiguousSelector(BrokerError):
    pass


class AuthenticationFailed(BrokerError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class UnknownSubject(AuthenticationFailed):
    def __init__(self, subject: str):
        super().__init__("unknown-subject", subject)


class NoClaimsAvailable(BrokerError):
    pass


class SourceInvalid(BrokerError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Forbidden(BrokerError):
    pass


class UnknownProvider(BrokerError):
    pass


class InvalidSpec(BrokerError):
    pass


class TokenKind(str, Enum):
    ISSUE = "issue"
    VALIDATE = "validate"
    EXCHANGE = "exchange"


class AuthScheme(str, Enum):
    SHARED_SECRET = "shared-secret"
    SIGNATURE_CHALLENGE = "signature-challenge"


SELECTOR_FIELDS = ("requester", "service", "context_ref", "token_type")


def _str_set(values: Any, what: str) -> frozenset[str]:
    if isinstance(values, str):
        values = [values]
    if not isinstance(values, (list, tuple, set, frozenset)) or not all(isinstance(v, str) for v in values):
        raise InvalidSpec(f"{what} must be a list of strings")
    return frozenset(values)


@dataclass(frozen=True)
class FederationSelector:
    """Match rules over request metadata; a missing field matches anything.

    Two selectors overlap when some metadata could match both, i.e. every
    field they both constrain has a common allowed value.
    """

    rules: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        unknown = set(self.rules) - set(SELECTOR_FIELDS)
        if unknown:
            raise InvalidSpec(f"unknown selector fields {sorted(unknown)}")
        if not self.rules:
            raise InvalidSpec("selector must constrain at least one field")
        if any(not v for v in self.rules.values()):
            raise InvalidSpec("selector field with no allowed values")

    @classmethod
    def ref(cls, context_ref: str) -> "FederationSelector":
        """A bare unique-identifier selector."""
        return cls({"context_ref": frozenset([context_ref])})

    def matches(self, meta: Mapping[str, str]) -> bool:
        return all(meta.get(k) in allowed for k, allowed in self.rules.items())

    def overlaps(self, other: "FederationSelector") -> bool:
        shared = set(self.rules) & set(other.rules)
        return all(self.rules[k] & other.rules[k] for k in shared)

    def to_doc(self) -> dict[str, list[str]]:
        return {k: sorted(v) for k, v in self.rules.items()}

    @classmethod
    def from_doc(cls, doc: Any) -> "FederationSelector":
        if isinstance(doc, str):
            return cls.ref(doc)
        if not isinstance(doc, dict):
            raise InvalidSpec("selector must be an object or a bare identifier")
        return cls({k: _str_set(v, f"selector.{k}") for k, v in doc.items()})


@dataclass(frozen=True)
class PartnerDescriptor:
    """A directed trust edge: this broker accepts tokens issued by ``partner_id``.

    ``key_ref`` names the partner's key in the broker's registry.
    ``accepted_claims`` limits which of the partner's claims are taken in.
    """

    partner_id: str
    key_ref: str = ""
    accepted_claims: Optional[frozenset[str]] = None

    def __post_init__(self) -> None:
        if not self.partner_id:
            raise InvalidSpec("partner id must be non-empty")
        if not self.key_ref:
            object.__setattr__(self, "key_ref", self.partner_id)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.partner_id, "key_ref": self.key_ref}
        if self.accepted_claims is not None:
            doc["accepted_claims"] = sorted(self.accepted_claims)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "PartnerDescriptor":
        if isinstance(doc, str):
            return cls(doc)
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise InvalidSpec("partner needs an id")
        accepted = doc.get("accepted_claims")
        return cls(
            doc["id"],
            doc.get("key_ref", ""),
            None if accepted is None else _str_set(accepted, "accepted_claims"),
        )


def secret_digest(secret: str | bytes) -> str:
    if isinstance(secret, str):
        secret = secret.encode("utf-8")
    return hashlib.sha256(secret).hexdigest()


@dataclass(frozen=True)
class InternalIdentity:
    """A registered internal subject.

    For shared-secret the credential is the sha256 hex digest of the secret;
    for signature-challenge it is the subject's raw public key.
    """

    subject_id: str
    scheme: AuthScheme
    credential: bytes
    attributes: tuple[Attribute, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", AuthScheme(self.scheme))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.subject_id or not self.credential:
            raise InvalidSpec("identity needs a subject id and a credential")

    @classmethod
    def with_secret(cls, subject_id: str, secret: str, attributes: Iterable[Attribute] = ()) -> "InternalIdentity":
        return cls(subject_id, AuthScheme.SHARED_SECRET, secret_digest(secret).encode("ascii"), tuple(attributes))

    def to_doc(self) -> dict[str, Any]:
        return {
            "attributes": [a.to_doc() for a in self.attributes],
            "credential": b64e(self.credential),
            "scheme": self.scheme.value,
            "subject": self.subject_id,
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "InternalIdentity":
        try:
            if "secret" in doc:
                # convenience form for hand-written configs
                return cls.with_secret(doc["subject"], doc["secret"], [Attribute.from_doc(a) for a in doc.get("attributes", [])])
            return cls(
                doc["subject"],
                AuthScheme(doc["scheme"]),
                b64d(doc["credential"]),
                tuple(Attribute.from_doc(a) for a in doc.get("attributes", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad identity: {exc}") from exc


@dataclass(frozen=True)
class Credential:
    """What a requester presents: a secret or a signed challenge."""

    scheme: AuthScheme
    subject_id: str
    secret: str = ""
    challenge: bytes = b""
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", AuthScheme(self.scheme))

    @classmethod
    def shared_secret(cls, subject_id: str, secret: str) -> "Credential":
        return cls(AuthScheme.SHARED_SECRET, subject_id, secret=secret)


@dataclass(frozen=True)
class Claim:
    name: str
    value: Any
    issuer: str

    def to_doc(self) -> dict[str, Any]:
        return {"issuer": self.issuer, "name": self.name, "value": self.value}

    @classmethod
    def from_doc(cls, doc: Any) -> "Claim":
        if not isinstance(doc, dict) or set(doc) != {"issuer", "name", "value"}:
            raise CanonicalizationError("bad claim")
        return cls(doc["name"], doc["value"], doc["issuer"])


@dataclass(frozen=True)
class TransformRule:
    """Maps one internal attribute id to one external claim name.

    With ``value_map`` only mapped values pass (and are renamed); without it
    values pass through. ``disclose=False`` suppresses the claim entirely.
    """

    internal: str
    external: str
    value_map: Optional[Mapping[str, Any]] = None
    disclose: bool = True

    def apply(self, value: Any) -> tuple[bool, Any]:
        if not self.disclose:
            return False, None
        if self.value_map is None:
            return True, value
        key = str(value)
        if key not in self.value_map:
            return False, None
        return True, self.value_map[key]

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"disclose": self.disclose, "external": self.external, "internal": self.internal}
        if self.value_map is not None:
            doc["value_map"] = dict(self.value_map)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "TransformRule":
        if not isinstance(doc, dict) or not isinstance(doc.get("internal"), str) or not isinstance(doc.get("external"), str):
            raise InvalidSpec("transformation rule needs internal and external names")
        vm = doc.get("value_map")
        if vm is not None and not isinstance(vm, dict):
            raise InvalidSpec("value_map must be an object")
        return cls(doc["internal"], doc["external"], vm, bool(doc.get("disclose", True)))


@dataclass(frozen=True)
class ClaimValidityRule:
    """A token is valid only if some value of ``clause.attribute_id`` matches."""

    clause: Clause
    token_type: Optional[str] = None

    def applies_to(self, token_type: str) -> bool:
        return self.token_type is None or self.token_type == token_type

    def passes(self, claims: Iterable[Claim]) -> bool:
        return any(c.name == self.clause.attribute_id and self.clause.matches_value(c.value) for c in claims)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"clause": self.clause.to_doc()}
        if self.token_type is not None:
            doc["token_type"] = self.token_type
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "ClaimValidityRule":
        try:
            return cls(Clause.from_doc(doc["clause"]), doc.get("token_type"))
        except Exception as exc:
            raise InvalidSpec(f"bad claims-validity rule: {exc}") from exc


ISSUE_STAGES = ("authenticate", "claims", "transform", "disclosure", "proof-key", "sign", "obligations")
REQUIRED_STAGES = ("authenticate", "claims", "transform", "sign")


@dataclass(frozen=True)
class ProviderConfig:
    """Per-context provider settings, one field per provider."""

    identities: Mapping[str, InternalIdentity] = field(default_factory=dict)
    transformation: tuple[TransformRule, ...] = ()
    validity_rules: tuple[ClaimValidityRule, ...] = ()
    auth_schemes: frozenset[AuthScheme] = frozenset({AuthScheme.SHARED_SECRET, AuthScheme.SIGNATURE_CHALLENGE})
    obligations: tuple[Obligation, ...] = ()
    disclosure: Optional[frozenset[str]] = None
    process: tuple[str, ...] = ISSUE_STAGES
    token_lifetime: int = 3600
    allow_empty: bool = False
    service_access: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "auth_schemes", frozenset(AuthScheme(s) for s in self.auth_schemes))
        unknown = [s for s in self.process if s not in ISSUE_STAGES]
        if unknown:
            raise InvalidSpec(f"process references unknown providers {unknown}")
        positions = [self.process.index(s) for s in REQUIRED_STAGES if s in self.process]
        if len(positions) != len(REQUIRED_STAGES) or positions != sorted(positions):
            raise InvalidSpec(f"process must run {list(REQUIRED_STAGES)} in that order")
        if len(set(self.process)) != len(self.process):
            raise InvalidSpec("process repeats a stage")
        if self.token_lifetime <= 0:
            raise InvalidSpec("token lifetime must be positive")
        outputs = [r.internal for r in self.transformation]
        if len(set(outputs)) != len(outputs):
            raise InvalidSpec("two transformation rules for the same internal attribute")

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "allow_empty": self.allow_empty,
            "auth_schemes": sorted(s.value for s in self.auth_schemes),
            "identities": [self.identities[k].to_doc() for k in sorted(self.identities)],
            "obligations": [o.to_doc() for o in self.obligations],
            "process": list(self.process),
            "service_access": self.service_access,
            "token_lifetime": self.token_lifetime,
            "transformation": [r.to_doc() for r in self.transformation],
            "validity_rules": [r.to_doc() for r in self.validity_rules],
        }
        if self.disclosure is not None:
            doc["disclosure"] = sorted(self.disclosure)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "ProviderConfig":
        if not isinstance(doc, dict):
            raise InvalidSpec("providers must be an object")
        known = {
            "allow_empty", "auth_schemes", "disclosure", "identities", "obligations", "process",
            "service_access", "token_lifetime", "transformation", "validity_rules",
        }
        extra = set(doc) - known
        if extra:
            raise InvalidSpec(f"unknown provider settings {sorted(extra)}")
        identities = {}
        for d in doc.get("identities", []):
            ident = InternalIdentity.from_doc(d)
            if ident.subject_id in identities:
                raise InvalidSpec(f"subject {ident.subject_id!r} registered twice")
            identities[ident.subject_id] = ident
        disclosure = doc.get("disclosure")
        try:
            return cls(
                identities=identities,
                transformation=tuple(TransformRule.from_doc(r) for r in doc.get("transformation", [])),
                validity_rules=tuple(ClaimValidityRule.from_doc(r) for r in doc.get("validity_rules", [])),
                auth_schemes=frozenset(doc.get("auth_schemes", [s.value for s in AuthScheme])),
                obligations=tuple(Obligation.from_doc(o) for o in doc.get("obligations", [])),
                disclosure=None if disclosure is None else _str_set(disclosure, "disclosure"),
                process=tuple(doc.get("process", ISSUE_STAGES)),
                token_lifetime=int(doc.get("token_lifetime", 3600)),
                allow_empty=bool(doc.get("allow_empty", False)),
                service_access=bool(doc.get("service_access", False)),
            )
        except InvalidSpec:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise InvalidSpec(str(exc)) from exc


@dataclass(frozen=True)
class FederationContext:
    federation_id: str
    selector: FederationSelector
    partners: tuple[PartnerDescriptor, ...] = ()
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    enabled: bool = True

    def __post_init__(self) -> None:
        if not self.federation_id:
            raise InvalidSpec("federation id must be non-empty")
        ids = [p.partner_id for p in self.partners]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("duplicate partner")

    def partner(self, partner_id: str) -> Optional[PartnerDescriptor]:
        for p in self.partners:
            if p.partner_id == partner_id:
                return p
        return None

    def with_providers(self, **changes: Any) -> "FederationContext":
        return replace(self, providers=replace(self.providers, **changes))

    def to_doc(self) -> dict[str, Any]:
        return {
            "enabled": self.enabled,
            "federation_id": self.federation_id,
            "partners": [p.to_doc() for p in self.partners],
            "providers": self.providers.to_doc(),
            "selector": self.selector.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "FederationContext":
        if not isinstance(doc, dict) or not isinstance(doc.get("federation_id"), str):
            raise InvalidSpec("context needs a federation_id")
        fid = doc["federation_id"]
        return cls(
            federation_id=fid,
            selector=FederationSelector.from_doc(doc.get("selector", fid)),
            partners=tuple(PartnerDescriptor.from_doc(p) for p in doc.get("partners", [])),
            providers=ProviderConfig.from_doc(doc.get("providers", {})),
            enabled=bool(doc.get("enabled", True)),
        )


@dataclass(frozen=True)
class SecurityToken:
    token_id: str
    issuer: str
    subject: str
    claims: tuple[Claim, ...]
    federation_id: str
    not_before: int
    not_after: int
    proof_key: bytes
    token_type: str = "claims"
    source_token: Optional[str] = None
    envelope: Optional[SignedDocument] = field(default=None, compare=False)

    def body_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "claims": [c.to_doc() for c in self.claims],
            "federation": self.federation_id,
            "id": self.token_id,
            "issuer": self.issuer,
            "proof_key": b64e(self.proof_key),
            "subject": self.subject,
            "type": self.token_type,
            "validity": [self.not_before, self.not_after],
        }
        if self.source_token is not None:
            doc["source"] = self.source_token
        return doc

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now < self.not_after

    @classmethod
    def from_envelope(cls, env: SignedDocument) -> "SecurityToken":
        """Structural parse; raises CanonicalizationError on anything unexpected."""
        doc = env.document
        keys = {"claims", "federation", "id", "issuer", "proof_key", "subject", "type", "validity"}
        if not isinstance(doc, dict) or not keys <= set(doc) or not set(doc) <= keys | {"source"}:
            raise CanonicalizationError("not a token body")
        validity = doc["validity"]
        if (
            not isinstance(validity, list)
            or len(validity) != 2
            or not all(isinstance(t, int) and not isinstance(t, bool) for t in validity)
            or validity[0] >= validity[1]
        ):
            raise CanonicalizationError("bad validity")
        for k in ("federation", "id", "issuer", "subject", "type"):
            if not isinstance(doc[k], str):
                raise CanonicalizationError(f"bad {k}")
        if doc["issuer"] != env.signer_id:
            raise CanonicalizationError("issuer and signer differ")
        if not isinstance(doc["claims"], list):
            raise CanonicalizationError("bad claims")
        try:
            proof_key = b64d(doc["proof_key"])
        except (TypeError, ValueError) as exc:
            raise CanonicalizationError("bad proof key") from exc
        return cls(
            token_id=doc["id"],
            issuer=doc["issuer"],
            subject=doc["subject"],
            claims=tuple(Claim.from_doc(c) for c in doc["claims"]),
            federation_id=doc["federation"],
            not_before=validity[0],
            not_after=validity[1],
            proof_key=proof_key,
            token_type=doc["type"],
            source_token=doc.get("source"),
            envelope=env,
        )

    @classmethod
    def from_wire(cls, data: bytes | str) -> "SecurityToken":
        """Accepts canonical envelope bytes or their base64 armor."""
        if isinstance(data, str):
            env = SignedDocument.unarmor(data)
        else:
            env = SignedDocument.from_bytes(data)
        return cls.from_envelope(env)

    def to_bytes(self) -> bytes:
        if self.envelope is None:
            raise ValueError("token is not signed")
        return self.envelope.to_bytes()

    def armor(self) -> str:
        if self.envelope is None:
            raise ValueError("token is not signed")
        return self.envelope.armor()


@dataclass(frozen=True)
class TokenRequest:
    """``meta`` holds selector inputs: requester, service, context_ref, token_type."""

    kind: TokenKind
    meta: Mapping[str, str]
    credential: Optional[Credential] = None
    token: Optional[bytes | str] = None
    hints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TokenKind(self.kind))
        if self.kind is TokenKind.ISSUE and self.credential is None:
            raise InvalidSpec("issue requests need a credential")
        if self.kind is not TokenKind.ISSUE and self.token is None:
            raise InvalidSpec(f"{self.kind.value} requests need a token")

    @classmethod
    def issue(cls, context_ref: str, credential: Credential, **meta: str) -> "TokenRequest":
        return cls(TokenKind.ISSUE, {"context_ref": context_ref, "requester": credential.subject_id, **meta}, credential)


@dataclass(frozen=True)
class Issued:
    token: SecurityToken
    proof_key_private: bytes
    obligations: tuple[Obligation, ...] = ()


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    claims: tuple[Claim, ...] = ()
    reason: str = "ok"
    token: Optional[SecurityToken] = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "claims": [c.to_doc() for c in self.claims],
            "reason": self.reason,
            "valid": self.valid,
        }

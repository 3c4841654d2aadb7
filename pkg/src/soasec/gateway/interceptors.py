"""Built-in interceptors, one per action type.

Each interceptor is built from the step parameters merged over the IRP
implementation config, and raises :class:`StepFailure` to reject.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, ClassVar, Mapping, Optional, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESSIV

from soasec.broker.model import BrokerError, Credential, SecurityToken, TokenRequest
from soasec.broker.broker import signed_challenge
from soasec.core.audit import EventType
from soasec.core.canonical import CanonicalizationError, canonicalize, parse
from soasec.core.crypto import b64d, b64e, sign, verify
from soasec.core.model import EndpointReference, attr
from soasec.gateway.message import Message, PathError, split_path
from soasec.gateway.policy import ECP, USP, ActionType, Interface
from soasec.gateway.services import UtilityUnavailable
from soasec.pdp.model import Decision, DecisionRequest, Obligation, RequestError

if TYPE_CHECKING:
    from soasec.gateway.instance import GatewayInstance


class StepFailure(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class BadInterceptorConfig(ValueError):
    pass


@dataclass
class StepContext:
    """What an interceptor sees while running one step for one message."""

    msg: Message
    state: dict[str, Any]
    ecp: ECP
    step_index: int
    usp_ref: Optional[str]
    usp: USP
    gateway: "GatewayInstance"
    run_nested: Callable[[str], None]
    notes: dict[str, Any] = field(default_factory=dict)

    def call(self, interface: Interface, fn: Callable[[Any], Any]) -> Any:
        if self.usp_ref is None:
            raise StepFailure(f"no utility reference for {interface.value}")
        try:
            return self.gateway.services.call(self.usp, self.usp_ref, fn, interface)
        except UtilityUnavailable as exc:
            raise StepFailure(f"utility-unavailable:{self.usp_ref}") from exc

    @property
    def context_ref(self) -> str:
        return self.msg.headers.get("context-reference", "")

    def emit(self, event_type: EventType, **payload: Any) -> None:
        self.gateway.events.emit(event_type, self.gateway.id, self.context_ref, correlation=self.msg.correlation_id, **payload)


class Interceptor:
    action: ClassVar[ActionType]

    def __init__(self, params: Mapping[str, Any]):
        self.params = dict(params)
        try:
            self.configure()
        except BadInterceptorConfig:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise BadInterceptorConfig(f"{self.action.value}: {exc}") from exc

    def configure(self) -> None:
        pass

    def run(self, ctx: StepContext) -> None:
        raise NotImplementedError

    def _paths(self) -> list[str]:
        paths = self.params["paths"]
        if not isinstance(paths, list) or not paths:
            raise BadInterceptorConfig(f"{self.action.value}: paths must be a non-empty list")
        for p in paths:
            if not split_path(p):
                raise BadInterceptorConfig("cannot address the body root")
        return paths


# -- structure -------------------------------------------------------------------

SCHEMA_TYPES: dict[str, Callable[[Any], bool]] = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
}


class ValidateStructure(Interceptor):
    action = ActionType.VALIDATE_STRUCTURE

    def configure(self) -> None:
        schema = self.params["schema"]
        if not isinstance(schema, dict) or not isinstance(schema.get("id"), str):
            raise BadInterceptorConfig("schema needs an id")
        self.required = list(schema.get("required", []))
        self.types = dict(schema.get("types", {}))
        for p in self.required + list(self.types):
            split_path(p)
        unknown = set(self.types.values()) - set(SCHEMA_TYPES)
        if unknown:
            raise BadInterceptorConfig(f"unknown schema types {sorted(unknown)}")

    def run(self, ctx: StepContext) -> None:
        for p in self.required:
            if not ctx.msg.has(p):
                raise StepFailure(f"schema:missing:{p}")
        for p, t in sorted(self.types.items()):
            if ctx.msg.has(p) and not SCHEMA_TYPES[t](ctx.msg.get(p)):
                raise StepFailure(f"schema:type:{p}")


class Transform(Interceptor):
    action = ActionType.TRANSFORM

    def configure(self) -> None:
        self.set_ = dict(self.params.get("set", {}))
        self.ensure = dict(self.params.get("ensure", {}))
        self.delete = list(self.params.get("delete", []))
        for p in list(self.set_) + list(self.ensure) + self.delete:
            if not split_path(p):
                raise BadInterceptorConfig("cannot rewrite the body root")

    def run(self, ctx: StepContext) -> None:
        try:
            for p in self.delete:
                if ctx.msg.has(p):
                    ctx.msg.delete(p)
            for p, v in self.set_.items():
                ctx.msg.set(p, v)
            for p, v in self.ensure.items():
                if not ctx.msg.has(p):
                    ctx.msg.set(p, v)
        except PathError as exc:
            raise StepFailure(f"transform:{exc}") from exc


# -- tokens -----------------------------------------------------------------------


def credential_from_doc(doc: Any, broker_id: str, federation_id: str, nonce: str) -> Credential:
    if not isinstance(doc, dict):
        raise StepFailure("token-issue:no-credential")
    scheme = doc.get("scheme", "shared-secret")
    if scheme == "shared-secret":
        return Credential.shared_secret(doc["subject"], doc["secret"])
    return signed_challenge(doc["subject"], b64d(doc["key"]), broker_id, federation_id, nonce)


class InsertToken(Interceptor):
    action = ActionType.INSERT_TOKEN

    def configure(self) -> None:
        if not isinstance(self.params.get("context", ""), str):
            raise BadInterceptorConfig("context must be a federation reference")

    def run(self, ctx: StepContext) -> None:
        # without a fixed context the message's own reference is used
        context = self.params.get("context") or ctx.context_ref
        if not context:
            raise StepFailure("token-issue:no-context")
        token_type = self.params.get("token_type", "claims")

        def issue(broker: Any):
            fid = broker.select_federation(context).federation_id
            cred = credential_from_doc(ctx.msg.annotations.get("credential"), broker.broker_id, fid, ctx.msg.correlation_id)
            return broker.issue_token(TokenRequest.issue(context, cred, token_type=token_type))

        try:
            issued = ctx.call(Interface.STS, issue)
        except BrokerError as exc:
            raise StepFailure(f"token-issue:{type(exc).__name__}") from exc
        except (KeyError, ValueError) as exc:
            raise StepFailure("token-issue:bad-credential") from exc
        ctx.msg.headers["token"] = issued.token.armor()
        ctx.msg.headers["context-reference"] = context
        ctx.msg.annotations["proof-key"] = b64e(issued.proof_key_private)
        ctx.msg.annotations["token-id"] = issued.token.token_id
        if issued.obligations:
            ctx.msg.annotations["token-obligations"] = [o.to_doc() for o in issued.obligations]


class ValidateToken(Interceptor):
    action = ActionType.VALIDATE_TOKEN

    def configure(self) -> None:
        issuers = self.params.get("issuers")
        if issuers is not None and not (isinstance(issuers, list) and all(isinstance(i, str) for i in issuers)):
            raise BadInterceptorConfig("issuers must be a list of broker ids")

    def run(self, ctx: StepContext) -> None:
        wire = ctx.msg.headers.get("token")
        if not wire:
            raise StepFailure("token:missing")
        context = self.params.get("context") or ctx.context_ref
        try:
            claimed_issuer = SecurityToken.from_wire(wire).issuer
        except (CanonicalizationError, ValueError, TypeError, UnicodeDecodeError):
            claimed_issuer = None
        if claimed_issuer is not None and ctx.gateway.is_blocked(claimed_issuer, context):
            raise StepFailure("token:blocked")
        result = ctx.call(Interface.STS, lambda broker: broker.validate_token(wire, context))
        if not result.valid:
            issuer = result.token.issuer if result.token is not None else ""
            if result.reason == "invalid-claims":
                subject = result.token.subject if result.token is not None else ""
                ctx.gateway.events.emit(
                    EventType.INVALID_CLAIMS, ctx.gateway.id, context,
                    correlation=ctx.msg.correlation_id, issuer=issuer, subject=subject,
                )
            else:
                ctx.gateway.events.emit(
                    EventType.TOKEN_REJECTED, ctx.gateway.id, context,
                    correlation=ctx.msg.correlation_id, issuer=issuer, reason=result.reason,
                )
            raise StepFailure(f"token:{result.reason}")
        token = result.token
        assert token is not None
        issuers = self.params.get("issuers")
        if issuers is not None and token.issuer not in issuers:
            raise StepFailure("token:issuer-not-accepted")
        if "token_type" in self.params and token.token_type != self.params["token_type"]:
            raise StepFailure("token:wrong-type")
        ctx.msg.annotations.update(
            {
                "claims": [c.to_doc() for c in result.claims],
                "proof-key-public": b64e(token.proof_key),
                "subject": token.subject,
                "token-id": token.token_id,
                "token-issuer": token.issuer,
            }
        )


# -- authorization -------------------------------------------------------------------


def _default_attribute(claim_name: str) -> str:
    return "subject.claim." + claim_name


class Authorize(Interceptor):
    action = ActionType.AUTHORIZE

    def configure(self) -> None:
        self.claim_map = dict(self.params.get("claims", {}))

    def _request(self, ctx: StepContext) -> DecisionRequest:
        subject = ctx.msg.annotations.get("subject")
        if not subject:
            raise StepFailure("authz:no-subject")
        action = self.params.get("action") or ctx.msg.headers.get("action")
        resource = self.params.get("resource") or ctx.msg.headers.get("resource")
        if not action or not resource:
            raise StepFailure("authz:bad-request")
        attributes = [attr("subject.id", subject), attr("action.id", action)]
        for c in ctx.msg.annotations.get("claims", []):
            attributes.append(attr(self.claim_map.get(c["name"], _default_attribute(c["name"])), c["value"]))
        try:
            req = DecisionRequest(tuple(attributes), tuple(resource.split(",")), ctx.msg.correlation_id)
            req.validate()
        except (RequestError, ValueError) as exc:
            raise StepFailure("authz:bad-request") from exc
        return req

    def run(self, ctx: StepContext) -> None:
        req = self._request(ctx)
        try:
            resp = ctx.call(Interface.PDP, lambda pdp: pdp.decide(req))
        except RequestError as exc:
            raise StepFailure("authz:bad-request") from exc
        decisions = resp.decisions
        ctx.msg.annotations["decision"] = {k: v.value for k, v in decisions.items()}
        for rid, d in decisions.items():
            if d is not Decision.PERMIT:
                raise StepFailure(f"authz:{d.value}")
        for result in resp.results.values():
            for ob in result.obligations:
                ctx.gateway.fulfil(ob, ctx)


# -- element signatures ----------------------------------------------------------------


def element_digest_input(path: str, value: Any, token_id: str) -> bytes:
    return canonicalize({"path": path, "token": token_id, "value": value})


def _signatures(msg: Message) -> dict[str, list[str]]:
    raw = msg.headers.get("x-signatures")
    if raw is None:
        return {}
    doc = parse(raw.encode("utf-8"))
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise ValueError("bad signature header")
    return doc


class SignElements(Interceptor):
    action = ActionType.SIGN_ELEMENTS

    def configure(self) -> None:
        self.paths = self._paths()

    def run(self, ctx: StepContext) -> None:
        key = ctx.msg.annotations.get("proof-key")
        token_id = ctx.msg.annotations.get("token-id", "")
        if not key:
            raise StepFailure("sign:no-proof-key")
        try:
            sigs = _signatures(ctx.msg)
        except (CanonicalizationError, ValueError) as exc:
            raise StepFailure("sign:bad-signature-header") from exc
        for p in self.paths:
            if not ctx.msg.has(p):
                raise StepFailure(f"sign:missing:{p}")
            sig = sign(element_digest_input(p, ctx.msg.get(p), token_id), b64d(key))
            sigs.setdefault(p, []).append(b64e(sig))
        ctx.msg.headers["x-signatures"] = canonicalize(sigs).decode("utf-8")


class VerifyElements(Interceptor):
    action = ActionType.VERIFY_ELEMENTS

    def configure(self) -> None:
        self.paths = self._paths()

    def run(self, ctx: StepContext) -> None:
        key = ctx.msg.annotations.get("proof-key-public")
        token_id = ctx.msg.annotations.get("token-id", "")
        if not key:
            raise StepFailure("verify:no-validated-token")
        try:
            sigs = _signatures(ctx.msg)
        except (CanonicalizationError, ValueError) as exc:
            raise StepFailure("verify:bad-signature-header") from exc
        public = b64d(key)
        for p in self.paths:
            if not ctx.msg.has(p):
                raise StepFailure(f"verify:missing:{p}")
            data = element_digest_input(p, ctx.msg.get(p), token_id)
            ok = False
            for s in sigs.get(p, []):
                try:
                    ok = verify(data, b64d(s), public)
                except (ValueError, TypeError, binascii.Error):
                    ok = False
                if ok:
                    break
            if not ok:
                raise StepFailure(f"verify:bad-signature:{p}")


# -- element encryption ---------------------------------------------------------------


class ElementCipher(Protocol):
    def encrypt(self, key: bytes, plaintext: bytes, associated: bytes) -> bytes: ...

    def decrypt(self, key: bytes, ciphertext: bytes, associated: bytes) -> bytes: ...


class AesSiv:
    """Deterministic authenticated encryption; the element path is bound as associated data."""

    def encrypt(self, key: bytes, plaintext: bytes, associated: bytes) -> bytes:
        return AESSIV(key).encrypt(plaintext, [associated])

    def decrypt(self, key: bytes, ciphertext: bytes, associated: bytes) -> bytes:
        return AESSIV(key).decrypt(ciphertext, [associated])


CIPHERS: dict[str, ElementCipher] = {"aes-siv": AesSiv()}


class _CipherStep(Interceptor):
    def configure(self) -> None:
        self.paths = self._paths()
        if not isinstance(self.params["key"], str):
            raise BadInterceptorConfig("key must name a keystore entry")
        self.transform = self.params.get("transform", "aes-siv")
        if self.transform not in CIPHERS:
            raise BadInterceptorConfig(f"unknown transform {self.transform!r}")

    def _key(self, ctx: StepContext) -> bytes:
        try:
            return ctx.call(Interface.KEYSTORE, lambda ks: ks.key(self.params["key"]))
        except KeyError as exc:
            raise StepFailure(f"{self.action.value}:no-key") from exc


class EncryptElements(_CipherStep):
    action = ActionType.ENCRYPT_ELEMENTS

    def run(self, ctx: StepContext) -> None:
        key = self._key(ctx)
        cipher = CIPHERS[self.transform]
        for p in self.paths:
            if not ctx.msg.has(p):
                raise StepFailure(f"encrypt:missing:{p}")
            ct = cipher.encrypt(key, canonicalize(ctx.msg.get(p)), p.encode("utf-8"))
            ctx.msg.set(p, {"alg": self.transform, "enc": b64e(ct), "key": self.params["key"]})


class DecryptElements(_CipherStep):
    action = ActionType.DECRYPT_ELEMENTS

    def run(self, ctx: StepContext) -> None:
        key = self._key(ctx)
        cipher = CIPHERS[self.transform]
        for p in self.paths:
            element = ctx.msg.get(p, None)
            if not isinstance(element, dict) or set(element) != {"alg", "enc", "key"} or element["alg"] != self.transform:
                raise StepFailure(f"decrypt:not-encrypted:{p}")
            try:
                plain = cipher.decrypt(key, b64d(element["enc"]), p.encode("utf-8"))
                ctx.msg.set(p, parse(plain))
            except (InvalidTag, ValueError, TypeError, CanonicalizationError) as exc:
                raise StepFailure(f"decrypt:failed:{p}") from exc


# -- plumbing actions ----------------------------------------------------------------


class Route(Interceptor):
    action = ActionType.ROUTE

    def configure(self) -> None:
        EndpointReference(self.params["next_hop"])

    def run(self, ctx: StepContext) -> None:
        ctx.msg.annotations["route"] = self.params["next_hop"]


class AuditEmit(Interceptor):
    action = ActionType.AUDIT_EMIT

    def configure(self) -> None:
        self.event = EventType(self.params.get("event", EventType.MESSAGE_PROCESSED.value))

    def run(self, ctx: StepContext) -> None:
        ctx.emit(self.event, note=str(self.params.get("note", "")), ecp=ctx.ecp.id, step=ctx.step_index)


class InvokePolicy(Interceptor):
    action = ActionType.INVOKE_POLICY

    def configure(self) -> None:
        if not isinstance(self.params["policy"], str):
            raise BadInterceptorConfig("invoke-policy needs a policy id")

    def run(self, ctx: StepContext) -> None:
        ctx.run_nested(self.params["policy"])


INTERCEPTORS: dict[str, type[Interceptor]] = {
    f"std/{cls.action.value}": cls
    for cls in (
        ValidateStructure, Transform, InsertToken, ValidateToken, Authorize, SignElements,
        VerifyElements, EncryptElements, DecryptElements, Route, AuditEmit, InvokePolicy,
    )
}


# -- obligations ----------------------------------------------------------------------


def _ob_audit(ob: Obligation, ctx: StepContext) -> None:
    ctx.emit(EventType.MESSAGE_PROCESSED, obligation=ob.id, **ob.parameters)


def _ob_add_header(ob: Obligation, ctx: StepContext) -> None:
    try:
        ctx.msg.headers[ob.parameters["name"]] = ob.parameters["value"]
    except KeyError as exc:
        raise StepFailure("obligation:bad-parameters") from exc


def _ob_require_assertion(ob: Obligation, ctx: StepContext) -> None:
    if ob.cep_assertion_ref not in ctx.msg.annotations.get("assertions", []):
        raise StepFailure(f"obligation:unsatisfied:{ob.cep_assertion_ref}")


OBLIGATIONS: dict[str, Callable[[Obligation, StepContext], None]] = {
    "audit": _ob_audit,
    "add-header": _ob_add_header,
    "require-assertion": _ob_require_assertion,
}

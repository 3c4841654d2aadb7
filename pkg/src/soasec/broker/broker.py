"""The identity broker: issue, validate and exchange tokens per federation context."""

from __future__ import annotations

import hmac
import itertools
import threading
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from soasec.core.audit import Clock, EventLog, EventType, SystemClock
from soasec.core.canonical import CanonicalizationError, canonicalize, parse
from soasec.core.crypto import KeyPair, KeyRegistry, derive_keypair, generate_keypair, sign, verify
from soasec.core.model import SignedDocument
from soasec.pdp.model import Obligation, SchemaError
from soasec.broker.model import (
    AmbiguousSelector,
    AuthenticationFailed,
    AuthScheme,
    Claim,
    ClaimValidityRule,
    Credential,
    FederationContext,
    FederationNotFound,
    Forbidden,
    InternalIdentity,
    InvalidSpec,
    Issued,
    NoClaimsAvailable,
    PartnerDescriptor,
    SecurityToken,
    SourceInvalid,
    TokenKind,
    TokenRequest,
    TransformRule,
    UnknownProvider,
    UnknownSubject,
    ValidationResult,
    secret_digest,
)

ServiceAccessHook = Callable[[FederationContext, SecurityToken, tuple[Claim, ...]], bool]
ProviderHandler = Callable[[FederationContext, str, Mapping[str, Any]], tuple[FederationContext, Any]]

CORE_OPERATIONS = ("create-federation", "enable", "disable", "inspect")


def challenge_bytes(broker_id: str, federation_id: str, nonce: str) -> bytes:
    return canonicalize({"broker": broker_id, "federation": federation_id, "nonce": nonce})


def signed_challenge(subject_id: str, signing_key: bytes, broker_id: str, federation_id: str, nonce: str) -> Credential:
    data = challenge_bytes(broker_id, federation_id, nonce)
    return Credential(AuthScheme.SIGNATURE_CHALLENGE, subject_id, challenge=data, signature=sign(data, signing_key))


@dataclass(frozen=True)
class IssuanceRecord:
    token_id: str
    federation_id: str
    subject: str
    issued_at: int
    wire: str
    source_token: Optional[str] = None

    def to_doc(self) -> dict[str, Any]:
        doc = {
            "at": self.issued_at,
            "federation": self.federation_id,
            "subject": self.subject,
            "token": self.token_id,
            "wire": self.wire,
        }
        if self.source_token is not None:
            doc["source"] = self.source_token
        return doc


class IdentityBroker:
    """A federation-context-aware security token service.

    ``seed`` makes proof keys and token ids deterministic (for transcripts);
    leave it unset in production so both come from the OS.
    """

    def __init__(
        self,
        broker_id: str,
        keypair: KeyPair,
        registry: KeyRegistry | None = None,
        clock: Clock | None = None,
        events: EventLog | None = None,
        admins: Iterable[str] = (),
        seed: bytes | None = None,
        service_access: ServiceAccessHook | None = None,
        log_path: str | Path | None = None,
    ):
        self.broker_id = broker_id
        self.keypair = keypair
        self.registry = registry if registry is not None else KeyRegistry()
        if broker_id not in self.registry:
            self.registry.register(broker_id, keypair.public)
        self.clock = clock or SystemClock()
        self.events = events if events is not None else EventLog(self.clock)
        self.admins = frozenset(admins) | {broker_id}
        self.service_access = service_access
        self.log_path = Path(log_path) if log_path is not None else None
        self._seed = seed
        self._counter = itertools.count(1)
        self._contexts: dict[str, FederationContext] = {}
        self._meta: dict[str, dict[str, int]] = {}
        self._issued: list[IssuanceRecord] = []
        self._seen_nonces: set[bytes] = set()
        self._lock = threading.Lock()
        self._handlers: dict[str, ProviderHandler] = dict(PROVIDER_HANDLERS)

    # -- configuration ---------------------------------------------------

    @property
    def contexts(self) -> dict[str, FederationContext]:
        return dict(self._contexts)

    def add_context(self, ctx: FederationContext) -> None:
        with self._lock:
            self._check_exclusive(ctx, self._contexts)
            now = self.clock.now()
            self._contexts = {**self._contexts, ctx.federation_id: ctx}
            self._meta[ctx.federation_id] = {"created": now, "modified": now, "version": 1}

    @staticmethod
    def _check_exclusive(ctx: FederationContext, existing: Mapping[str, FederationContext]) -> None:
        if ctx.federation_id in existing:
            raise InvalidSpec(f"federation {ctx.federation_id!r} already exists")
        for other in existing.values():
            if other.selector.overlaps(ctx.selector):
                raise InvalidSpec(f"selector of {ctx.federation_id!r} overlaps {other.federation_id!r}")

    def register_provider(self, name: str, handler: ProviderHandler) -> None:
        """Plug in a management module for a provider id."""
        self._handlers[name] = handler

    def to_config(self) -> dict[str, Any]:
        return {
            "admins": sorted(self.admins - {self.broker_id}),
            "broker_id": self.broker_id,
            "contexts": [self._contexts[k].to_doc() for k in sorted(self._contexts)],
        }

    @classmethod
    def from_config(cls, doc: Mapping[str, Any], keypair: KeyPair, **kw: Any) -> "IdentityBroker":
        if not isinstance(doc, Mapping) or not isinstance(doc.get("broker_id"), str):
            raise InvalidSpec("broker config needs a broker_id")
        broker = cls(doc["broker_id"], keypair, admins=doc.get("admins", []), **kw)
        for c in doc.get("contexts", []):
            broker.add_context(FederationContext.from_doc(c))
        return broker

    # -- selection & authentication --------------------------------------

    def select_federation(self, meta: Mapping[str, str] | TokenRequest | str) -> FederationContext:
        if isinstance(meta, TokenRequest):
            meta = meta.meta
        elif isinstance(meta, str):
            meta = {"context_ref": meta}
        snapshot = self._contexts
        hits = [c for c in snapshot.values() if c.enabled and c.selector.matches(meta)]
        if not hits:
            raise FederationNotFound(f"no federation context matches {dict(meta)}")
        if len(hits) > 1:
            raise AmbiguousSelector(f"{sorted(c.federation_id for c in hits)} all match")
        return hits[0]

    def authenticate(self, credential: Credential, ctx: FederationContext) -> InternalIdentity:
        try:
            return self._authenticate(credential, ctx)
        except AuthenticationFailed as exc:
            self.events.emit(
                EventType.TOKEN_REJECTED,
                self.broker_id,
                ctx.federation_id,
                operation="issue",
                reason=exc.reason,
                subject=credential.subject_id,
            )
            raise

    def _authenticate(self, credential: Credential, ctx: FederationContext) -> InternalIdentity:
        ident = ctx.providers.identities.get(credential.subject_id)
        if ident is None:
            raise UnknownSubject(credential.subject_id)
        if credential.scheme not in ctx.providers.auth_schemes or credential.scheme is not ident.scheme:
            raise AuthenticationFailed("scheme-mismatch", f"{credential.scheme.value} for {ident.scheme.value}")
        if ident.scheme is AuthScheme.SHARED_SECRET:
            if not hmac.compare_digest(secret_digest(credential.secret).encode("ascii"), ident.credential):
                raise AuthenticationFailed("bad-credential")
            return ident
        try:
            nonce = parse(credential.challenge).get("nonce")
        except (CanonicalizationError, AttributeError):
            raise AuthenticationFailed("bad-challenge") from None
        # the challenge must name this broker and context, so it cannot be replayed elsewhere
        if not isinstance(nonce, str) or challenge_bytes(self.broker_id, ctx.federation_id, nonce) != credential.challenge:
            raise AuthenticationFailed("bad-challenge")
        if not verify(credential.challenge, credential.signature, ident.credential):
            raise AuthenticationFailed("bad-credential")
        with self._lock:
            if credential.challenge in self._seen_nonces:
                raise AuthenticationFailed("replayed-challenge")
            self._seen_nonces.add(credential.challenge)
        return ident

    # -- issuance ----------------------------------------------------------

    def _next(self) -> tuple[str, KeyPair]:
        n = next(self._counter)
        if self._seed is None:
            return uuid.uuid4().hex, generate_keypair()
        return f"{self.broker_id}-{n:06d}", derive_keypair(self._seed, f"{self.broker_id}/proof/{n}")

    def issue_token(self, req: TokenRequest) -> Issued:
        if req.kind is not TokenKind.ISSUE or req.credential is None:
            raise InvalidSpec("issue_token needs an issue request")
        ctx = self.select_federation(req)
        return _IssuePipeline(self, ctx).run(req.credential, req.hints, req.meta.get("token_type", "claims"))

    def _record(self, issued: SecurityToken, at: int) -> None:
        rec = IssuanceRecord(issued.token_id, issued.federation_id, issued.subject, at, issued.armor(), issued.source_token)
        with self._lock:
            self._issued.append(rec)
            if self.log_path is not None:
                with open(self.log_path, "ab") as fh:
                    fh.write(canonicalize(rec.to_doc()) + b"\n")
        self.events.emit(
            EventType.TOKEN_ISSUED,
            self.broker_id,
            issued.federation_id,
            token=issued.token_id,
            subject=issued.subject,
            **({"source": issued.source_token} if issued.source_token else {}),
        )

    @property
    def issuance_log(self) -> tuple[IssuanceRecord, ...]:
        return tuple(self._issued)

    def reconstruct(self, token_id: str) -> SecurityToken:
        for rec in self._issued:
            if rec.token_id == token_id:
                return SecurityToken.from_wire(rec.wire)
        raise KeyError(token_id)

    # -- validation ------------------------------------------------------

    def validate_token(self, token: bytes | str, context: Mapping[str, str] | str) -> ValidationResult:
        """Never raises; the first failed check names the reason."""
        try:
            ctx = self.select_federation(context)
        except (FederationNotFound, AmbiguousSelector):
            ref = context if isinstance(context, str) else str(context.get("context_ref", ""))
            return self._reject(ref, "unknown-context", None)
        return self._validate_in(ctx, token)

    def _validate_in(self, ctx: FederationContext, token: bytes | str) -> ValidationResult:
        fid = ctx.federation_id
        try:
            tok = SecurityToken.from_wire(token)
        except (CanonicalizationError, ValueError, TypeError, UnicodeDecodeError):
            return self._reject(fid, "malformed", None)
        if tok.federation_id != fid:
            return self._reject(fid, "context-mismatch", tok)
        if tok.issuer == self.broker_id:
            key: Optional[bytes] = self.keypair.public
            partner = None
        else:
            partner = ctx.partner(tok.issuer)
            if partner is None:
                return self._reject(fid, "untrusted-issuer", tok)
            key = self.registry.key_of(partner.key_ref)
        assert tok.envelope is not None
        if key is None or not tok.envelope.verify_with(key):
            return self._reject(fid, "bad-signature", tok)
        now = self.clock.now()
        if now < tok.not_before:
            return self._reject(fid, "not-yet-valid", tok)
        if now >= tok.not_after:
            return self._reject(fid, "expired", tok)
        claims = tok.claims
        if partner is not None and partner.accepted_claims is not None:
            claims = tuple(c for c in claims if c.name in partner.accepted_claims)
        for rule in ctx.providers.validity_rules:
            if rule.applies_to(tok.token_type) and not rule.passes(claims):
                self.events.emit(
                    EventType.INVALID_CLAIMS,
                    self.broker_id,
                    fid,
                    issuer=tok.issuer,
                    token=tok.token_id,
                    subject=tok.subject,
                    rule=canonicalize(rule.to_doc()).decode("utf-8"),
                )
                return ValidationResult(False, claims, "invalid-claims", tok)
        if ctx.providers.service_access and self.service_access is not None:
            if not self.service_access(ctx, tok, claims):
                return self._reject(fid, "access-denied", tok)
        self.events.emit(EventType.TOKEN_VALIDATED, self.broker_id, fid, issuer=tok.issuer, token=tok.token_id)
        return ValidationResult(True, claims, "ok", tok)

    def _reject(self, fid: str, reason: str, tok: Optional[SecurityToken]) -> ValidationResult:
        payload = {"reason": reason}
        if tok is not None:
            payload.update(issuer=tok.issuer, token=tok.token_id)
        self.events.emit(EventType.TOKEN_REJECTED, self.broker_id, fid, operation="validate", **payload)
        return ValidationResult(False, (), reason, tok)

    # -- exchange --------------------------------------------------------

    def exchange_token(
        self,
        token: bytes | str,
        target: Mapping[str, str] | str,
        source: Mapping[str, str] | str | None = None,
    ) -> Issued:
        if source is None:
            try:
                source = SecurityToken.from_wire(token).federation_id
            except (CanonicalizationError, ValueError, TypeError, UnicodeDecodeError):
                raise SourceInvalid("malformed") from None
        result = self.validate_token(token, source)
        if not result.valid or result.token is None:
            raise SourceInvalid(result.reason)
        target_ctx = self.select_federation(target)
        return _IssuePipeline(self, target_ctx).exchange(result.token, result.claims)

    # -- management --------------------------------------------------------

    def manage(self, principal: str, target: str, operation: str, args: Mapping[str, Any] | None = None) -> Any:
        """``target`` is ``core`` or a provider id; provider requests are forwarded."""
        args = dict(args or {})
        if principal not in self.admins:
            raise Forbidden(f"{principal!r} may not manage {self.broker_id}")
        if target == "core":
            result = self._core(operation, args)
        else:
            handler = self._handlers.get(target)
            if handler is None:
                raise UnknownProvider(target)
            fid = args.get("federation_id")
            with self._lock:
                ctx = self._contexts.get(fid) if isinstance(fid, str) else None
                if ctx is None:
                    raise FederationNotFound(f"no federation {fid!r}")
                new_ctx, result = handler(ctx, operation, args)
                if new_ctx is not ctx:
                    self._contexts = {**self._contexts, fid: new_ctx}
                    self._touch(fid)
        if operation != "inspect" and not operation.startswith("list"):
            self.events.emit(
                EventType.CONFIG_CHANGED,
                self.broker_id,
                str(args.get("federation_id", "")),
                target=target,
                operation=operation,
                principal=principal,
            )
        return result

    def _touch(self, fid: str) -> None:
        meta = self._meta[fid]
        self._meta[fid] = {**meta, "modified": self.clock.now(), "version": meta["version"] + 1}

    def _core(self, operation: str, args: dict[str, Any]) -> Any:
        if operation == "create-federation":
            ctx = FederationContext.from_doc(args.get("spec"))
            self.add_context(ctx)
            return ctx.to_doc()
        if operation == "inspect":
            fid = args.get("federation_id")
            ids = sorted(self._contexts) if fid is None else [fid]
            out = []
            for i in ids:
                if i not in self._contexts:
                    raise FederationNotFound(f"no federation {i!r}")
                out.append({"config": self._contexts[i].to_doc(), "meta": dict(self._meta[i])})
            return out if fid is None else out[0]
        if operation in ("enable", "disable"):
            fid = args.get("federation_id")
            with self._lock:
                ctx = self._contexts.get(fid) if isinstance(fid, str) else None
                if ctx is None:
                    raise FederationNotFound(f"no federation {fid!r}")
                self._contexts = {**self._contexts, fid: replace(ctx, enabled=operation == "enable")}
                self._touch(fid)
            return {"enabled": operation == "enable", "federation_id": fid}
        raise InvalidSpec(f"unknown core operation {operation!r}")


class _IssuePipeline:
    """One issuance run bound to a snapshot of a single context."""

    def __init__(self, broker: IdentityBroker, ctx: FederationContext):
        self.broker = broker
        self.ctx = ctx
        self.providers = ctx.providers

    def _transform(self, inputs: Iterable[tuple[str, Any]]) -> list[Claim]:
        rules = {r.internal: r for r in self.providers.transformation}
        claims = []
        for name, value in inputs:
            rule = rules.get(name)
            if rule is None:
                continue  # privacy default: undeclared attributes are dropped
            keep, out = rule.apply(value)
            if keep:
                claims.append(Claim(rule.external, out, self.broker.broker_id))
        return claims

    def _disclose(self, claims: list[Claim], hints: tuple[str, ...]) -> list[Claim]:
        allowed = self.providers.disclosure
        if allowed is not None:
            claims = [c for c in claims if c.name in allowed]
        if hints:
            claims = [c for c in claims if c.name in hints]
        return claims

    def run(self, credential: Credential, hints: tuple[str, ...], token_type: str) -> Issued:
        stages = self.providers.process
        ident = self.broker.authenticate(credential, self.ctx)
        inputs = [(a.id, a.value) for a in ident.attributes] if "claims" in stages else []
        claims = self._transform(inputs)
        if "disclosure" in stages:
            claims = self._disclose(claims, hints)
        return self._finish(ident.subject_id, claims, token_type, None)

    def exchange(self, source: SecurityToken, claims: tuple[Claim, ...]) -> Issued:
        out = self._transform((c.name, c.value) for c in claims)
        if "disclosure" in self.providers.process:
            out = self._disclose(out, ())
        return self._finish(source.subject, out, source.token_type, source.token_id)

    def _finish(self, subject: str, claims: list[Claim], token_type: str, source: Optional[str]) -> Issued:
        if not claims and not self.providers.allow_empty:
            raise NoClaimsAvailable(f"no claims for {subject!r} in {self.ctx.federation_id!r}")
        token_id, proof = self.broker._next()
        if "proof-key" not in self.providers.process:
            proof = KeyPair(b"", b"")
        now = self.broker.clock.now()
        token = SecurityToken(
            token_id=token_id,
            issuer=self.broker.broker_id,
            subject=subject,
            claims=tuple(sorted(claims, key=lambda c: (c.name, canonicalize(c.value)))),
            federation_id=self.ctx.federation_id,
            not_before=now,
            not_after=now + self.providers.token_lifetime,
            proof_key=proof.public,
            token_type=token_type,
            source_token=source,
        )
        env = SignedDocument.create(token.body_doc(), self.broker.broker_id, self.broker.keypair.private)
        token = replace(token, envelope=env)
        obligations = self.providers.obligations if "obligations" in self.providers.process else ()
        self.broker._record(token, now)
        return Issued(token, proof.private, tuple(obligations))


# -- provider management modules ------------------------------------------------


def _need(args: Mapping[str, Any], key: str) -> Any:
    if key not in args:
        raise InvalidSpec(f"missing argument {key!r}")
    return args[key]


def _manage_transformation(ctx: FederationContext, op: str, args: Mapping[str, Any]):
    rules = ctx.providers.transformation
    if op == "list":
        return ctx, [r.to_doc() for r in rules]
    if op == "add-rule":
        rule = TransformRule.from_doc(_need(args, "rule"))
        kept = tuple(r for r in rules if r.internal != rule.internal)
        return ctx.with_providers(transformation=kept + (rule,)), rule.to_doc()
    if op == "remove-rule":
        internal = _need(args, "internal")
        kept = tuple(r for r in rules if r.internal != internal)
        if len(kept) == len(rules):
            raise InvalidSpec(f"no rule for {internal!r}")
        return ctx.with_providers(transformation=kept), {"removed": internal}
    raise InvalidSpec(f"unknown claims-transformation operation {op!r}")


def _manage_validity(ctx: FederationContext, op: str, args: Mapping[str, Any]):
    rules = ctx.providers.validity_rules
    if op == "list":
        return ctx, [r.to_doc() for r in rules]
    if op == "add-rule":
        rule = ClaimValidityRule.from_doc(_need(args, "rule"))
        return ctx.with_providers(validity_rules=rules + (rule,)), rule.to_doc()
    if op == "remove-rule":
        index = _need(args, "index")
        if not isinstance(index, int) or not 0 <= index < len(rules):
            raise InvalidSpec(f"no rule at {index!r}")
        return ctx.with_providers(validity_rules=rules[:index] + rules[index + 1 :]), {"removed": index}
    if op == "clear":
        return ctx.with_providers(validity_rules=()), {"removed": len(rules)}
    raise InvalidSpec(f"unknown claims-validity operation {op!r}")


def _manage_partners(ctx: FederationContext, op: str, args: Mapping[str, Any]):
    if op == "list":
        return ctx, [p.to_doc() for p in ctx.partners]
    if op == "add-partner":
        partner = PartnerDescriptor.from_doc(_need(args, "partner"))
        kept = tuple(p for p in ctx.partners if p.partner_id != partner.partner_id)
        return replace(ctx, partners=kept + (partner,)), partner.to_doc()
    if op == "remove-partner":
        pid = _need(args, "partner_id")
        kept = tuple(p for p in ctx.partners if p.partner_id != pid)
        if len(kept) == len(ctx.partners):
            raise InvalidSpec(f"no partner {pid!r}")
        return replace(ctx, partners=kept), {"removed": pid}
    raise InvalidSpec(f"unknown federation-partner operation {op!r}")


def _manage_claims(ctx: FederationContext, op: str, args: Mapping[str, Any]):
    identities = dict(ctx.providers.identities)
    if op == "list":
        return ctx, sorted(identities)
    if op == "register-identity":
        ident = InternalIdentity.from_doc(_need(args, "identity"))
        if ident.subject_id in identities:
            raise InvalidSpec(f"subject {ident.subject_id!r} already registered")
        identities[ident.subject_id] = ident
        return ctx.with_providers(identities=identities), {"registered": ident.subject_id}
    if op == "remove-identity":
        subject = _need(args, "subject")
        if identities.pop(subject, None) is None:
            raise InvalidSpec(f"no subject {subject!r}")
        return ctx.with_providers(identities=identities), {"removed": subject}
    raise InvalidSpec(f"unknown claims operation {op!r}")


def _manage_obligations(ctx: FederationContext, op: str, args: Mapping[str, Any]):
    obligations = ctx.providers.obligations
    if op == "list":
        return ctx, [o.to_doc() for o in obligations]
    if op == "add":
        try:
            ob = Obligation.from_doc(_need(args, "obligation"))
        except SchemaError as exc:
            raise InvalidSpec(str(exc)) from exc
        return ctx.with_providers(obligations=obligations + (ob,)), ob.to_doc()
    if op == "remove":
        oid = _need(args, "id")
        kept = tuple(o for o in obligations if o.id != oid)
        return ctx.with_providers(obligations=kept), {"removed": len(obligations) - len(kept)}
    raise InvalidSpec(f"unknown obligation operation {op!r}")


PROVIDER_HANDLERS: dict[str, ProviderHandler] = {
    "claims-transformation": _manage_transformation,
    "claims-validity": _manage_validity,
    "federation-partner": _manage_partners,
    "claims": _manage_claims,
    "obligation": _manage_obligations,
}

"""Compartmented policy store, the signed-policy loader and the PAP service.

Root policies and delegated/administrative policies live in separate
compartments. Every mutation, and every refused mutation attempt, is
appended to the change log. Readers take an immutable snapshot; writers
serialize on a lock and swap in fresh dicts (copy-on-write).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional

from soasec.core.audit import Clock, SystemClock
from soasec.core.canonical import CanonicalizationError, canonicalize, parse
from soasec.core.crypto import KeyRegistry
from soasec.core.model import Principal, SignedDocument
from soasec.pdp.model import AuthzPolicy, PolicyKind, SchemaError


class PolicyLoadError(Exception):
    """Base for load-time rejections; the store is left unchanged."""


class BadSignature(PolicyLoadError):
    pass


class UntrustedRootSigner(PolicyLoadError):
    pass


class DuplicatePolicyId(PolicyLoadError):
    pass


class PapError(Exception):
    pass


class Forbidden(PapError):
    pass


class NotFound(PapError):
    pass


class PapOp(str, Enum):
    ADD = "add"
    REMOVE = "remove"
    ENABLE = "enable"
    DISABLE = "disable"
    LIST = "list"


@dataclass(frozen=True)
class StoredPolicy:
    policy: AuthzPolicy
    document: SignedDocument
    loaded_at: int
    enabled: bool = True
    removed_at: Optional[int] = None

    @property
    def id(self) -> str:
        return self.policy.id

    def describe(self) -> dict[str, Any]:
        p = self.policy
        return {
            "enabled": self.enabled,
            "id": p.id,
            "issuer": p.issuer,
            "kind": p.kind.value,
            "loaded_at": self.loaded_at,
            "priority": p.priority,
            "removed_at": self.removed_at,
            "signer": self.document.signer_id,
            "validity": [p.not_before, p.not_after],
        }


@dataclass(frozen=True)
class ChangeRecord:
    timestamp: int
    principal: str
    operation: str
    policy_id: str
    outcome: str

    def to_doc(self) -> dict[str, Any]:
        return {
            "op": self.operation,
            "outcome": self.outcome,
            "policy": self.policy_id,
            "principal": self.principal,
            "ts": self.timestamp,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ChangeRecord":
        return cls(doc["ts"], doc["principal"], doc["op"], doc["policy"], doc["outcome"])


@dataclass(frozen=True)
class StoreSnapshot:
    root: tuple[StoredPolicy, ...]
    delegated: tuple[StoredPolicy, ...]
    trusted_authorities: frozenset[str]

    def all(self) -> tuple[StoredPolicy, ...]:
        return self.root + self.delegated

    def active(self, now: int) -> list[AuthzPolicy]:
        """Enabled policies inside their validity window, in id order."""
        return sorted(
            (sp.policy for sp in self.all() if sp.enabled and sp.policy.valid_at(now)),
            key=lambda p: p.id,
        )


class PolicyStore:
    ROOT_DIR = "root"
    DELEGATED_DIR = "delegated"
    ARCHIVE_DIR = "archive"
    CHANGELOG = "changelog.log"
    TRUSTED = "trusted.json"

    def __init__(
        self,
        registry: KeyRegistry,
        trusted_authorities: Iterable[str] = (),
        clock: Clock | None = None,
        directory: str | Path | None = None,
    ):
        self.registry = registry
        self.trusted_authorities = frozenset(trusted_authorities)
        self.clock = clock or SystemClock()
        self.directory = Path(directory) if directory is not None else None
        self._root: dict[str, StoredPolicy] = {}
        self._delegated: dict[str, StoredPolicy] = {}
        self._archive: list[StoredPolicy] = []
        self._changelog: list[ChangeRecord] = []
        self._lock = threading.Lock()
        self._snapshot = StoreSnapshot((), (), self.trusted_authorities)

    # -- reading ------------------------------------------------------------

    def snapshot(self) -> StoreSnapshot:
        return self._snapshot

    @property
    def change_log(self) -> tuple[ChangeRecord, ...]:
        return tuple(self._changelog)

    def get(self, policy_id: str) -> Optional[StoredPolicy]:
        return self._root.get(policy_id) or self._delegated.get(policy_id)

    def history(self) -> list[StoredPolicy]:
        """Everything ever loaded, including removed policies."""
        return sorted(
            list(self._root.values()) + list(self._delegated.values()) + self._archive,
            key=lambda sp: (sp.id, sp.loaded_at),
        )

    def __len__(self) -> int:
        return len(self._root) + len(self._delegated)

    # -- writing (callers hold no lock; these methods serialize) -------------

    def _publish(self) -> None:
        self._snapshot = StoreSnapshot(
            tuple(sorted(self._root.values(), key=lambda sp: sp.id)),
            tuple(sorted(self._delegated.values(), key=lambda sp: sp.id)),
            self.trusted_authorities,
        )

    def _log(self, principal: str, op: str, policy_id: str, outcome: str) -> None:
        record = ChangeRecord(self.clock.now(), principal, op, policy_id, outcome)
        self._changelog.append(record)
        if self.directory is not None:
            with open(self.directory / self.CHANGELOG, "ab") as fh:
                fh.write(canonicalize(record.to_doc()) + b"\n")

    def _compartment(self, kind: PolicyKind) -> dict[str, StoredPolicy]:
        return self._root if kind is PolicyKind.ROOT else self._delegated

    def _policy_path(self, sp: StoredPolicy) -> Path:
        assert self.directory is not None
        sub = self.ROOT_DIR if sp.policy.kind is PolicyKind.ROOT else self.DELEGATED_DIR
        return self.directory / sub / f"{sp.id}.policy"

    def _install(self, sp: StoredPolicy, principal: str, *, persist: bool = True, log: bool = True) -> None:
        comp = dict(self._compartment(sp.policy.kind))
        comp[sp.id] = sp
        if sp.policy.kind is PolicyKind.ROOT:
            self._root = comp
        else:
            self._delegated = comp
        if persist and self.directory is not None:
            path = self._policy_path(sp)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(sp.document.to_bytes())
        if log:
            self._log(principal, PapOp.ADD.value, sp.id, "ok")
        self._publish()

    def _set_enabled(self, policy_id: str, enabled: bool, principal: str) -> StoredPolicy:
        sp = self.get(policy_id)
        assert sp is not None
        new = replace(sp, enabled=enabled)
        comp = dict(self._compartment(sp.policy.kind))
        comp[policy_id] = new
        if sp.policy.kind is PolicyKind.ROOT:
            self._root = comp
        else:
            self._delegated = comp
        self._log(principal, (PapOp.ENABLE if enabled else PapOp.DISABLE).value, policy_id, "ok")
        self._publish()
        return new

    def _remove(self, policy_id: str, principal: str) -> StoredPolicy:
        sp = self.get(policy_id)
        assert sp is not None
        comp = dict(self._compartment(sp.policy.kind))
        del comp[policy_id]
        if sp.policy.kind is PolicyKind.ROOT:
            self._root = comp
        else:
            self._delegated = comp
        retired = replace(sp, enabled=False, removed_at=self.clock.now())
        self._archive.append(retired)
        if self.directory is not None:
            archive = self.directory / self.ARCHIVE_DIR
            archive.mkdir(exist_ok=True)
            (archive / f"{sp.id}@{retired.removed_at}.policy").write_bytes(sp.document.to_bytes())
            self._policy_path(sp).unlink(missing_ok=True)
        self._log(principal, PapOp.REMOVE.value, policy_id, "ok")
        self._publish()
        return retired

    # -- persistence -------------------------------------------------------

    @classmethod
    def open(cls, directory: str | Path, registry: KeyRegistry, clock: Clock | None = None) -> "PolicyStore":
        """Open a store directory: ``root/``, ``delegated/``, ``changelog.log``, ``trusted.json``."""
        directory = Path(directory)
        trusted_file = directory / cls.TRUSTED
        trusted = parse(trusted_file.read_bytes()) if trusted_file.exists() else []
        store = cls(registry, trusted, clock, directory=None)
        for sub in (cls.ROOT_DIR, cls.DELEGATED_DIR):
            for path in sorted((directory / sub).glob("*.policy")):
                doc = SignedDocument.from_bytes(path.read_bytes())
                policy = _validate(store, doc)
                store._install(StoredPolicy(policy, doc, 0), doc.signer_id, persist=False, log=False)
        for path in sorted((directory / cls.ARCHIVE_DIR).glob("*.policy")):
            doc = SignedDocument.from_bytes(path.read_bytes())
            removed_at = int(path.stem.rpartition("@")[2])
            body = parse(doc.body)
            issuer = None if body.get("kind") == PolicyKind.ROOT.value else doc.signer_id
            policy = AuthzPolicy.from_body(body, issuer=issuer)
            store._archive.append(StoredPolicy(policy, doc, 0, enabled=False, removed_at=removed_at))
        log_path = directory / cls.CHANGELOG
        if log_path.exists():
            for line in log_path.read_bytes().splitlines():
                if not line.strip():
                    continue
                rec = ChangeRecord.from_doc(parse(line))
                store._changelog.append(rec)
                sp = store.get(rec.policy_id)
                if sp is None or rec.outcome != "ok":
                    continue
                if rec.operation == PapOp.ADD.value:
                    store._replace_quiet(replace(sp, loaded_at=rec.timestamp))
                elif rec.operation in (PapOp.ENABLE.value, PapOp.DISABLE.value):
                    store._replace_quiet(replace(sp, enabled=rec.operation == PapOp.ENABLE.value))
        store.directory = directory
        store._publish()
        return store

    def _replace_quiet(self, sp: StoredPolicy) -> None:
        comp = self._compartment(sp.policy.kind)
        comp[sp.id] = sp

    @classmethod
    def init(cls, directory: str | Path, trusted_authorities: Iterable[str]) -> None:
        directory = Path(directory)
        (directory / cls.ROOT_DIR).mkdir(parents=True, exist_ok=True)
        (directory / cls.DELEGATED_DIR).mkdir(parents=True, exist_ok=True)
        (directory / cls.TRUSTED).write_bytes(canonicalize(sorted(trusted_authorities)))
        (directory / cls.CHANGELOG).touch()


def _validate(store: PolicyStore, doc: SignedDocument) -> AuthzPolicy:
    """Syntax check, signature check, issuer generation. Does not mutate."""
    try:
        body = parse(doc.body)
    except CanonicalizationError as exc:
        raise SchemaError(str(exc)) from exc
    if not doc.verify_in(store.registry):
        raise BadSignature(f"signature by {doc.signer_id!r} does not verify")
    kind = body.get("kind") if isinstance(body, dict) else None
    if kind == PolicyKind.ROOT.value:
        if doc.signer_id not in store.trusted_authorities:
            raise UntrustedRootSigner(f"{doc.signer_id!r} is not a trusted authority")
        return AuthzPolicy.from_body(body, issuer=None)
    return AuthzPolicy.from_body(body, issuer=doc.signer_id)


def load_policy(store: PolicyStore, doc: SignedDocument, principal: str | None = None) -> AuthzPolicy:
    """Validate a signed policy and index it into its compartment.

    Root policies must be signed by a trusted authority and get no issuer;
    delegated and administrative policies get ``issuer = signer``. Any
    rejection leaves the store unchanged.
    """
    with store._lock:
        policy = _validate(store, doc)
        if store.get(policy.id) is not None:
            raise DuplicatePolicyId(policy.id)
        store._install(StoredPolicy(policy, doc, store.clock.now()), principal or doc.signer_id)
        return policy


def pap_apply(store: PolicyStore, principal: Principal | str, op: PapOp | str, args: dict[str, Any] | None = None) -> Any:
    """Administer the store on behalf of ``principal``.

    Root-compartment changes need a trusted authority. Delegated-compartment
    changes need a trusted authority or the policy's own issuer. ``list`` is
    open to every registered principal.
    """
    pid = principal.id if isinstance(principal, Principal) else principal
    op = PapOp(op)
    args = args or {}
    if pid not in store.registry:
        with store._lock:
            store._log(pid, op.value, str(args.get("policy_id", "")), "forbidden:unauthenticated")
        raise Forbidden(f"{pid!r} is not a registered principal")

    if op is PapOp.LIST:
        entries = [sp.describe() for sp in store.history()]
        return entries if args.get("all", True) else [e for e in entries if e["removed_at"] is None]

    if op is PapOp.ADD:
        doc: SignedDocument = args["document"]
        try:
            kind = parse(doc.body).get("kind")
        except (CanonicalizationError, AttributeError) as exc:
            raise SchemaError(str(exc)) from exc
        is_authority = pid in store.trusted_authorities
        allowed = is_authority if kind == PolicyKind.ROOT.value else (is_authority or pid == doc.signer_id)
        if not allowed:
            with store._lock:
                policy_id = str(parse(doc.body).get("id", ""))
                store._log(pid, op.value, policy_id, "forbidden")
            raise Forbidden(f"{pid!r} may not add to the {kind} compartment")
        return load_policy(store, doc, pid)

    policy_id = args["policy_id"]
    with store._lock:
        sp = store.get(policy_id)
        if sp is None:
            store._log(pid, op.value, policy_id, "not-found")
            raise NotFound(policy_id)
        is_authority = pid in store.trusted_authorities
        if sp.policy.kind is PolicyKind.ROOT:
            allowed = is_authority
        else:
            allowed = is_authority or pid == sp.policy.issuer
        if not allowed:
            store._log(pid, op.value, policy_id, "forbidden")
            raise Forbidden(f"{pid!r} may not {op.value} {policy_id!r}")
        if op is PapOp.REMOVE:
            return store._remove(policy_id, pid).describe()
        return store._set_enabled(policy_id, op is PapOp.ENABLE, pid).describe()

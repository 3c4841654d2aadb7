"""Operator command line: keys, policy administration, decisions, tokens, gateways, scenarios.

Every subcommand is a thin wrapper over one library call. Exit codes:
0 success, 1 operation denied or invalid result, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from soasec.broker import (
    BrokerError,
    Credential,
    IdentityBroker,
    InvalidSpec,
    SourceInvalid,
    TokenRequest,
)
from soasec.core.audit import EventLog, FrozenClock, SystemClock
from soasec.core.canonical import CanonicalizationError, canonicalize, parse
from soasec.core.crypto import (
    KeyFormatError,
    KeyRegistry,
    b64d,
    b64e,
    derive_keypair,
    generate_keypair,
    read_key_file,
    write_key_file,
)
from soasec.core.model import SignedDocument
from soasec.gateway import (
    ECP,
    GatewayInstance,
    IllegalTransition,
    InvalidBundle,
    KeyStore,
    LifecycleOp,
    Message,
    PolicyBundle,
    ServiceDirectory,
    derive_cep,
)
from soasec.harness import ScenarioError, load_scenario
from soasec.pdp import (
    PDP,
    AuthzPolicy,
    DecisionRequest,
    FileAttributeProvider,
    PapError,
    PapOp,
    PolicyLoadError,
    PolicyStore,
    RequestError,
    SchemaError,
    pap_apply,
)

EXIT_OK = 0
EXIT_DENIED = 1
EXIT_USAGE = 2

REGISTRY_ENV = "SOASEC_REGISTRY"


class UsageError(Exception):
    """Bad flags, unreadable files, malformed configuration: exit 2."""


class Denied(Exception):
    """The operation ran and said no: exit 1. ``doc`` is still printed."""

    def __init__(self, reason: str, doc: Any = None):
        super().__init__(reason)
        self.reason = reason
        self.doc = doc


# -- output ---------------------------------------------------------------------


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (dict, list)):
        return canonicalize(value).decode("utf-8")
    return "" if value is None else str(value)


def render_table(doc: Any) -> str:
    """Human-readable view; a list of objects becomes columns, an object becomes key/value lines."""
    if isinstance(doc, list) and doc and all(isinstance(r, dict) for r in doc):
        cols = sorted({k for r in doc for k in r})
        rows = [cols] + [[_cell(r.get(c)) for c in cols] for r in doc]
        widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows)
    if isinstance(doc, dict):
        width = max((len(k) for k in doc), default=0)
        return "\n".join(f"{k.ljust(width)}  {_cell(v)}" for k, v in sorted(doc.items()))
    if isinstance(doc, list):
        return "\n".join(_cell(v) for v in doc)
    return _cell(doc)


def _emit(args: argparse.Namespace, doc: Any, table: Optional[Callable[[], str]] = None) -> None:
    if args.format == "table":
        text = table() if table is not None else render_table(doc)
    else:
        text = canonicalize(doc).decode("utf-8")
    sys.stdout.write(text + "\n")


# -- inputs ---------------------------------------------------------------------


def _read_doc(path: str | Path) -> Any:
    try:
        return parse(Path(path).read_bytes())
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    except CanonicalizationError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _registry_path(args: argparse.Namespace) -> Optional[Path]:
    value = args.registry or os.environ.get(REGISTRY_ENV)
    return Path(value) if value else None


def _registry(args: argparse.Namespace, required: bool = False) -> KeyRegistry:
    path = _registry_path(args)
    if path is None:
        if required:
            raise UsageError(f"no key registry: pass --registry or set {REGISTRY_ENV}")
        return KeyRegistry()
    if not path.exists():
        if required:
            raise UsageError(f"{path}: no such registry")
        return KeyRegistry()
    try:
        return KeyRegistry.from_doc(_read_doc(path))
    except (KeyFormatError, AttributeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _key(path: str | Path):
    try:
        return read_key_file(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    except (KeyFormatError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _clock(now: Optional[int]):
    return FrozenClock(now) if now is not None else SystemClock()


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


# -- keys -----------------------------------------------------------------------


def cmd_keys(args: argparse.Namespace) -> int:
    if args.op == "gen":
        if not args.out:
            raise UsageError("keys gen needs --out")
        pair = derive_keypair(args.seed, args.id or args.out) if args.seed else generate_keypair()
        write_key_file(args.out, pair)
        doc = {"public": b64e(pair.public)}
        if args.id:
            _register(args, args.id, pair.public)
            doc["id"] = args.id
        _emit(args, doc)
        return EXIT_OK
    if args.op == "register":
        if not args.id or bool(args.public) == bool(args.key):
            raise UsageError("keys register needs --id and exactly one of --public, --key")
        try:
            public = b64d(args.public) if args.public else _key(args.key).public
        except ValueError as exc:
            raise UsageError(f"--public: {exc}") from exc
        _register(args, args.id, public)
        _emit(args, {"id": args.id, "public": b64e(public)})
        return EXIT_OK
    reg = _registry(args, required=True)
    _emit(args, reg.to_doc(), lambda: render_table([{"id": k, "public": v} for k, v in reg.to_doc().items()]))
    return EXIT_OK


def _register(args: argparse.Namespace, principal: str, public: bytes) -> None:
    path = _registry_path(args)
    if path is None:
        raise UsageError(f"no key registry: pass --registry or set {REGISTRY_ENV}")
    reg = _registry(args)
    try:
        reg.register(principal, public)
    except (KeyFormatError, ValueError) as exc:
        raise Denied(str(exc), {"id": principal, "reason": str(exc)}) from exc
    reg.save(path)


# -- pap ------------------------------------------------------------------------


def _open_store(args: argparse.Namespace) -> PolicyStore:
    directory = Path(args.store)
    if not directory.is_dir():
        raise UsageError(f"{directory}: not a policy store")
    try:
        return PolicyStore.open(directory, _registry(args), _clock(getattr(args, "now", None)))
    except (PolicyLoadError, SchemaError, CanonicalizationError, ValueError) as exc:
        raise UsageError(f"{directory}: {exc}") from exc


def _policy_document(args: argparse.Namespace) -> SignedDocument:
    doc = _read_doc(args.policy)
    if isinstance(doc, dict) and "signature" in doc:
        try:
            return SignedDocument.from_doc(doc)
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{args.policy}: {exc}") from exc
    if not args.sign_key:
        raise UsageError(f"{args.policy} is unsigned; pass --sign-key")
    try:
        policy = AuthzPolicy.from_body(doc)
    except (SchemaError, ValueError) as exc:
        raise UsageError(f"{args.policy}: {exc}") from exc
    return policy.sign(args.principal, _key(args.sign_key).private)


def cmd_pap(args: argparse.Namespace) -> int:
    if args.op == "init":
        if not args.trusted:
            raise UsageError("pap init needs at least one --trusted authority")
        PolicyStore.init(args.store, args.trusted)
        _emit(args, {"store": str(args.store), "trusted": sorted(args.trusted)})
        return EXIT_OK
    if not args.principal:
        raise UsageError(f"pap {args.op} needs --as")
    store = _open_store(args)
    op = {"add": PapOp.ADD, "rm": PapOp.REMOVE, "enable": PapOp.ENABLE, "disable": PapOp.DISABLE, "list": PapOp.LIST}[args.op]
    if op is PapOp.ADD:
        if not args.policy:
            raise UsageError("pap add needs --policy")
        call_args: dict[str, Any] = {"document": _policy_document(args)}
    elif op is PapOp.LIST:
        call_args = {"all": args.all}
    else:
        if not args.id:
            raise UsageError(f"pap {args.op} needs --id")
        call_args = {"policy_id": args.id}
    try:
        result = pap_apply(store, args.principal, op, call_args)
    except (PapError, PolicyLoadError, SchemaError) as exc:
        raise Denied(type(exc).__name__, {"error": type(exc).__name__, "detail": str(exc), "op": op.value}) from exc
    if op is PapOp.ADD:
        result = store.get(result.id).describe()
    _emit(args, result)
    return EXIT_OK


# -- pdp ------------------------------------------------------------------------


def cmd_pdp(args: argparse.Namespace) -> int:
    store = _open_store(args)
    providers = [FileAttributeProvider.from_file(p) for p in args.attributes or ()]
    try:
        req = DecisionRequest.from_doc(_read_doc(args.request))
    except (RequestError, SchemaError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.request}: {exc}") from exc
    response = PDP(store, providers, clock=_clock(args.now)).decide(req)
    _emit(args, response.to_doc(), lambda: render_table(
        [{"resource": rid, "decision": d.value} for rid, d in sorted(response.decisions.items())]
    ))
    return EXIT_OK


# -- sts ------------------------------------------------------------------------


def load_broker(config: str | Path, key: str | Path, registry: KeyRegistry, *, now: Optional[int] = None,
                seed: Optional[str] = None, events: Optional[EventLog] = None) -> IdentityBroker:
    doc = _read_doc(config)
    clock = _clock(now)
    try:
        return IdentityBroker.from_config(
            doc, _key(key), registry=registry, clock=clock, events=events or EventLog(clock),
            seed=seed.encode("utf-8") if seed else None,
        )
    except (InvalidSpec, BrokerError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{config}: {exc}") from exc


def _read_token(path: str) -> bytes | str:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    stripped = data.strip()
    # canonical envelopes start with '{'; anything else is taken as base64 armor
    if stripped.startswith(b"{"):
        return stripped
    try:
        return stripped.decode("ascii")
    except UnicodeDecodeError:
        return stripped


def issued_doc(issued) -> dict[str, Any]:
    return {
        "obligations": [o.to_doc() for o in issued.obligations],
        "proof_key": b64e(issued.proof_key_private),
        "token": issued.token.armor(),
        "token_id": issued.token.token_id,
    }


def cmd_sts(args: argparse.Namespace) -> int:
    broker = load_broker(args.broker, args.key, _registry(args), now=args.now, seed=args.seed)
    if args.op == "issue":
        if not args.subject or args.secret is None:
            raise UsageError("sts issue needs --subject and --secret")
        try:
            issued = broker.issue_token(TokenRequest.issue(args.context, Credential.shared_secret(args.subject, args.secret)))
        except BrokerError as exc:
            reason = getattr(exc, "reason", None) or type(exc).__name__
            raise Denied(reason, {"reason": reason, "valid": False}) from exc
        _emit(args, issued_doc(issued))
        return EXIT_OK
    if not args.token:
        raise UsageError(f"sts {args.op} needs --token")
    token = _read_token(args.token)
    if args.op == "validate":
        result = broker.validate_token(token, args.context)
        doc = result.to_doc()
        if not result.valid:
            raise Denied(result.reason, doc)
        _emit(args, doc)
        return EXIT_OK
    if not args.target:
        raise UsageError("sts exchange needs --target")
    try:
        issued = broker.exchange_token(token, args.target, args.context)
    except SourceInvalid as exc:
        raise Denied(exc.reason, {"reason": exc.reason, "valid": False}) from exc
    except BrokerError as exc:
        reason = getattr(exc, "reason", None) or type(exc).__name__
        raise Denied(reason, {"reason": reason, "valid": False}) from exc
    _emit(args, issued_doc(issued))
    return EXIT_OK


# -- gateway --------------------------------------------------------------------


def _service(kind: str, spec: Mapping[str, Any], base: Path, registry: KeyRegistry, clock, events: EventLog, uri: str) -> Any:
    if kind == "broker":
        broker = load_broker(_resolve(base, spec["config"]), _resolve(base, spec["key"]), registry,
                             seed=spec.get("seed"), events=events)
        broker.clock = clock
        return broker
    if kind == "pdp":
        store = PolicyStore.open(_resolve(base, spec["store"]), registry, clock)
        return PDP(store, clock=clock, events=events, origin=spec.get("origin", uri))
    if kind == "keystore":
        if "keys" in spec:
            return KeyStore({name: b64d(v) for name, v in spec["keys"].items()})
        return KeyStore.derived(str(spec["master"]).encode("utf-8"), list(spec["names"]))
    raise UsageError(f"unknown service kind {kind!r} at {uri}")


class InstanceConfig:
    """A gateway instance described by a canonical config file.

    Keys: ``id``; ``bundle`` (path or inline document); ``services`` mapping
    endpoint URI to ``{"kind": "broker"|"pdp"|"keystore", ...}``; optional
    ``now`` for a frozen clock; optional ``state`` file where lifecycle and
    enforcement state persist between invocations. Relative paths resolve
    against the config file's directory.
    """

    def __init__(self, path: str | Path, registry: KeyRegistry):
        self.path = Path(path)
        doc = _read_doc(self.path)
        if not isinstance(doc, dict) or not isinstance(doc.get("id"), str):
            raise UsageError(f"{path}: instance config needs an id")
        self.doc = doc
        base = self.path.parent
        self.clock = _clock(doc.get("now"))
        self.events = EventLog(self.clock)
        directory = ServiceDirectory()
        try:
            for uri, spec in sorted(dict(doc.get("services", {})).items()):
                directory.bind(uri, _service(spec.get("kind", ""), spec, base, registry, self.clock, self.events, uri))
        except (KeyError, TypeError, ValueError, PolicyLoadError) as exc:
            raise UsageError(f"{path}: services: {exc}") from exc
        self.gateway = GatewayInstance(doc["id"], directory, self.events, self.clock)
        self.state_path = _resolve(base, doc["state"]) if isinstance(doc.get("state"), str) else None

    def bundle(self) -> Optional[PolicyBundle]:
        ref = self.doc.get("bundle")
        if ref is None:
            return None
        return read_bundle(_resolve(self.path.parent, ref) if isinstance(ref, str) else None, ref)

    def restore(self, start: bool) -> None:
        """Load saved state if any; otherwise, when ``start``, load and activate the configured bundle."""
        if self.state_path is not None and self.state_path.exists():
            try:
                self.gateway.import_state(_read_doc(self.state_path))
            except (InvalidBundle, IllegalTransition, ValueError) as exc:
                raise UsageError(f"{self.state_path}: {exc}") from exc
            return
        if start:
            bundle = self.bundle()
            if bundle is None:
                raise UsageError(f"{self.path}: no bundle and no saved state")
            try:
                self.gateway.load(bundle)
            except InvalidBundle as exc:
                raise UsageError(f"{self.path}: bundle: {exc}") from exc
            self.gateway.activate()

    def save(self) -> None:
        if self.state_path is not None:
            self.state_path.write_bytes(canonicalize(self.gateway.export_state()))


def read_bundle(path: Optional[Path], inline: Any = None) -> PolicyBundle:
    doc = _read_doc(path) if path is not None else inline
    try:
        return PolicyBundle.from_doc(doc)
    except (InvalidBundle, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path or 'bundle'}: {exc}") from exc


def cmd_gateway(args: argparse.Namespace) -> int:
    if args.op == "derive-cep":
        if not args.ecp:
            raise UsageError("gateway derive-cep needs --ecp")
        try:
            ecp = ECP.from_doc(_read_doc(args.ecp))
        except (InvalidBundle, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{args.ecp}: {exc}") from exc
        _emit(args, derive_cep(ecp).to_doc())
        return EXIT_OK
    if not args.instance:
        raise UsageError(f"gateway {args.op} needs --instance")
    inst = InstanceConfig(args.instance, _registry(args))
    if args.op == "run":
        if not args.message:
            raise UsageError("gateway run needs --message")
        try:
            msg = Message.from_doc(_read_doc(args.message))
        except (CanonicalizationError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{args.message}: {exc}") from exc
        inst.restore(start=True)
        result = inst.gateway.process(msg)
        inst.save()
        doc = result.to_doc()
        if not result.forwarded:
            raise Denied(result.reason, doc)
        _emit(args, doc)
        return EXIT_OK
    # lifecycle
    if not args.lifecycle_op:
        raise UsageError("gateway lifecycle needs --op")
    op = LifecycleOp(args.lifecycle_op)
    inst.restore(start=False)
    bundle = None
    if op is LifecycleOp.LOAD:
        bundle = read_bundle(Path(args.bundle)) if args.bundle else inst.bundle()
        if bundle is None:
            raise UsageError("gateway lifecycle --op load needs --bundle")
    try:
        inst.gateway.lifecycle(op, bundle)
    except (IllegalTransition, InvalidBundle) as exc:
        raise Denied(str(exc), {"op": op.value, "reason": str(exc), "status": inst.gateway.status.value}) from exc
    inst.save()
    current = inst.gateway.current
    _emit(args, {
        "op": op.value,
        "status": inst.gateway.status.value,
        "version": current.bundle.version if current is not None else None,
    })
    return EXIT_OK


# -- scenario -------------------------------------------------------------------


def cmd_scenario(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.file)
    except OSError as exc:
        raise UsageError(f"{args.file}: {exc.strerror or exc}") from exc
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc
    try:
        if args.matrix:
            matrix = scenario.validity_matrix(args.matrix)
            _emit(args, matrix.to_doc(), matrix.table)
            return EXIT_OK
        transcripts = scenario.run_script(until=args.until)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc
    if args.transcripts:
        Path(args.transcripts).write_bytes(b"".join(t.to_lines() for t in transcripts))
    if args.events:
        Path(args.events).write_bytes(scenario.events.to_lines())
    rows = [{"id": t.request.id, "outcome": t.outcome, "reason": t.reason, "stage": t.stage} for t in transcripts]
    _emit(args, {"results": rows}, lambda: render_table(rows))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 already; keep stderr-only diagnostics
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(p: argparse.ArgumentParser, fmt: Any, registry: Any) -> None:
        p.add_argument("--format", choices=("canonical", "table"), default=fmt)
        p.add_argument("--registry", default=registry, help=f"key registry file (default: ${REGISTRY_ENV})")

    # accepted before or after the subcommand; subparsers must not reset the top-level value
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS, argparse.SUPPRESS)

    parser = _Parser(prog="soasec", description=__doc__.splitlines()[0])
    global_flags(parser, "canonical", None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    keys = sub.add_parser("keys", parents=[common], help="keypairs and the key registry")
    keys.add_argument("op", choices=("gen", "register", "list"))
    keys.add_argument("--out", help="key file to write")
    keys.add_argument("--id", help="principal id to register")
    keys.add_argument("--seed", help="derive the key deterministically from this master secret")
    keys.add_argument("--public", help="base64 verification key")
    keys.add_argument("--key", help="key file whose public half to register")
    keys.set_defaults(handler=cmd_keys)

    pap = sub.add_parser("pap", parents=[common], help="policy administration")
    pap.add_argument("op", choices=("init", "add", "rm", "enable", "disable", "list"))
    pap.add_argument("--store", required=True)
    pap.add_argument("--as", dest="principal")
    pap.add_argument("--policy", help="policy file: signed envelope or unsigned body")
    pap.add_argument("--sign-key", help="sign an unsigned policy body as --as")
    pap.add_argument("--id", help="policy id for rm/enable/disable")
    pap.add_argument("--trusted", action="append", help="trusted root authority (init)")
    pap.add_argument("--all", action=argparse.BooleanOptionalAction, default=True, help="include removed policies")
    pap.add_argument("--now", type=int)
    pap.set_defaults(handler=cmd_pap)

    pdp = sub.add_parser("pdp", parents=[common], help="authorization decisions")
    pdp.add_argument("op", choices=("decide",))
    pdp.add_argument("--store", required=True)
    pdp.add_argument("--request", required=True)
    pdp.add_argument("--attributes", action="append", help="file-backed attribute provider")
    pdp.add_argument("--now", type=int)
    pdp.set_defaults(handler=cmd_pdp)

    sts = sub.add_parser("sts", parents=[common], help="token issue, validation and exchange")
    sts.add_argument("op", choices=("issue", "validate", "exchange"))
    sts.add_argument("--broker", required=True, help="broker config file")
    sts.add_argument("--key", required=True, help="broker signing key file")
    sts.add_argument("--context", required=True, help="federation context reference")
    sts.add_argument("--subject")
    sts.add_argument("--secret")
    sts.add_argument("--token", help="token file: canonical envelope or base64 armor")
    sts.add_argument("--target", help="target context for exchange")
    sts.add_argument("--seed", help="deterministic token ids and proof keys")
    sts.add_argument("--now", type=int)
    sts.set_defaults(handler=cmd_sts)

    gw = sub.add_parser("gateway", parents=[common], help="enforcement gateway operations")
    gw.add_argument("op", choices=("run", "derive-cep", "lifecycle"))
    gw.add_argument("--instance", help="instance config file")
    gw.add_argument("--message", help="message document")
    gw.add_argument("--ecp", help="enforcement configuration document")
    gw.add_argument("--op", dest="lifecycle_op", choices=[o.value for o in LifecycleOp])
    gw.add_argument("--bundle", help="bundle document for --op load")
    gw.set_defaults(handler=cmd_gateway)

    sc = sub.add_parser("scenario", parents=[common], help="multi-organization scenarios")
    sc.add_argument("op", choices=("run",))
    sc.add_argument("file")
    sc.add_argument("--until", help="stop after this script step")
    sc.add_argument("--matrix", metavar="CONTEXT", help="print the token validity matrix instead")
    sc.add_argument("--transcripts", help="write transcript records here")
    sc.add_argument("--events", help="write the audit event log here")
    sc.set_defaults(handler=cmd_scenario)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        sys.stderr.write(f"soasec: {exc}\n")
        return EXIT_USAGE
    except Denied as exc:
        if exc.doc is not None:
            _emit(args, exc.doc)
        sys.stderr.write(f"soasec: {exc.reason}\n")
        return EXIT_DENIED


if __name__ == "__main__":
    sys.exit(main())

"""The command line is a thin wrapper: each command is paired with the library call it wraps."""

from __future__ import annotations

from pathlib import Path

import pytest
from broker_fixtures import NOW, context, make_brokers
from gateway_fixtures import CREDENTIAL, orders_policy
from pdp_fixtures import KEYS

from soasec.cli import EXIT_DENIED, EXIT_OK, EXIT_USAGE, main
from soasec.core.audit import EventLog, FrozenClock
from soasec.core.canonical import canonicalize, parse, parse_strict
from soasec.core.model import attr
from soasec.core.crypto import KeyRegistry, b64e, read_key_file, write_key_file
from soasec.gateway import ECP, GatewayInstance, KeyStore, Message, PolicyBundle, ServiceDirectory, derive_cep
from soasec.harness import load_scenario, standard_bundle
from soasec.harness.builders import permit_role
from soasec.broker import Credential, IdentityBroker, TokenRequest, TransformRule
from soasec.pdp import PDP, AuthzPolicy, DecisionRequest, PolicyStore

ROOT = Path(__file__).resolve().parent.parent
THREE_ORG = ROOT / "scenarios" / "three_org.scenario"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def canonical(out: str):
    """Machine output must be exactly canonical bytes plus a newline."""
    assert out.endswith("\n")
    return parse_strict(out[:-1].encode("utf-8"))


@pytest.fixture()
def site(tmp_path):
    """Key files, a registry, two broker configs and a policy store on disk."""
    brokers, _, _ = make_brokers({"IB1": ["IB2"], "IB2": []})
    brokers["IB1"].add_context(context("F2", rules=[TransformRule("urn:role", "urn:f2:role")]))
    reg = KeyRegistry({"root": KEYS["root"].public, **{b: br.keypair.public for b, br in brokers.items()}})
    reg.save(tmp_path / "registry.json")
    for b, br in brokers.items():
        write_key_file(tmp_path / f"{b}.key", br.keypair)
        (tmp_path / f"{b}.broker").write_bytes(canonicalize(br.to_config()))
    write_key_file(tmp_path / "root.key", KEYS["root"])
    (tmp_path / "orders.policy").write_bytes(canonicalize(orders_policy().body_doc()))
    return tmp_path


def sts(site, *rest):
    return ["--registry", site / "registry.json", "sts", *rest]


# -- keys ------------------------------------------------------------------------


def test_keys_gen_register_list(capsys, tmp_path):
    reg = tmp_path / "reg.json"
    code, out, _ = run(capsys, "--registry", reg, "keys", "gen", "--out", tmp_path / "a.key", "--id", "alice", "--seed", "m")
    assert code == EXIT_OK
    doc = canonical(out)
    assert doc["public"] == b64e(read_key_file(tmp_path / "a.key").public)
    assert KeyRegistry.load(reg).key_of("alice") == read_key_file(tmp_path / "a.key").public

    code, out, _ = run(capsys, "--registry", reg, "keys", "register", "--id", "bob", "--public", doc["public"])
    assert code == EXIT_OK
    code, out, _ = run(capsys, "--registry", reg, "keys", "list")
    assert canonical(out) == KeyRegistry.load(reg).to_doc()
    assert set(canonical(out)) == {"alice", "bob"}


def test_keys_registry_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SOASEC_REGISTRY", str(tmp_path / "env.json"))
    assert run(capsys, "keys", "gen", "--out", tmp_path / "k", "--id", "p")[0] == EXIT_OK
    assert "p" in KeyRegistry.load(tmp_path / "env.json")


def test_keys_conflicting_registration_is_denied(capsys, tmp_path):
    reg = tmp_path / "reg.json"
    run(capsys, "--registry", reg, "keys", "gen", "--out", tmp_path / "a", "--id", "alice", "--seed", "one")
    code, _, err = run(capsys, "--registry", reg, "keys", "gen", "--out", tmp_path / "b", "--id", "alice", "--seed", "two")
    assert code == EXIT_DENIED and "already registered" in err


# -- pap / pdp -------------------------------------------------------------------


def test_pap_add_list_disable_rm(capsys, site):
    store = site / "store"
    reg = site / "registry.json"
    assert run(capsys, "pap", "init", "--store", store, "--trusted", "root")[0] == EXIT_OK
    code, out, _ = run(capsys, "--registry", reg, "pap", "add", "--store", store, "--as", "root",
                       "--policy", site / "orders.policy", "--sign-key", site / "root.key", "--now", 7)
    assert code == EXIT_OK
    assert canonical(out)["id"] == "orders" and canonical(out)["enabled"] is True
    assert (store / "root" / "orders.policy").exists()

    code, out, _ = run(capsys, "--registry", reg, "pap", "list", "--store", store, "--as", "IB1")
    assert canonical(out) == [sp.describe() for sp in PolicyStore.open(store, KeyRegistry.load(reg)).history()]

    assert run(capsys, "--registry", reg, "pap", "disable", "--store", store, "--as", "root", "--id", "orders")[0] == EXIT_OK
    assert PolicyStore.open(store, KeyRegistry.load(reg)).get("orders").enabled is False
    assert run(capsys, "--registry", reg, "pap", "rm", "--store", store, "--as", "root", "--id", "orders")[0] == EXIT_OK
    assert PolicyStore.open(store, KeyRegistry.load(reg)).get("orders") is None


def test_pap_forbidden_is_exit_1(capsys, site):
    store = site / "store"
    reg = site / "registry.json"
    run(capsys, "pap", "init", "--store", store, "--trusted", "root")
    code, out, _ = run(capsys, "--registry", reg, "pap", "add", "--store", store, "--as", "IB1",
                       "--policy", site / "orders.policy", "--sign-key", site / "IB1.key")
    assert code == EXIT_DENIED
    assert canonical(out)["error"] == "Forbidden"
    assert PolicyStore.open(store, KeyRegistry.load(reg)).get("orders") is None


def test_pap_missing_flags_are_usage_errors(capsys, site):
    store = site / "store"
    run(capsys, "pap", "init", "--store", store, "--trusted", "root")
    assert run(capsys, "pap", "rm", "--store", store, "--as", "root")[0] == EXIT_USAGE
    assert run(capsys, "pap", "add", "--store", store)[0] == EXIT_USAGE
    assert run(capsys, "pap", "list", "--store", site / "nowhere", "--as", "root")[0] == EXIT_USAGE


def test_pdp_decide_on_empty_store_is_not_applicable(capsys, site):
    store = site / "store"
    run(capsys, "pap", "init", "--store", store, "--trusted", "root")
    req = DecisionRequest.simple("alice", "read", "/orders/1")
    (site / "req.json").write_bytes(canonicalize(req.to_doc()))
    code, out, _ = run(capsys, "pdp", "decide", "--store", store, "--request", site / "req.json")
    assert code == EXIT_OK
    assert canonical(out)["results"]["/orders/1"]["decision"] == "NotApplicable"


def test_pdp_decide_pairs_with_library(capsys, site):
    store = site / "store"
    reg = site / "registry.json"
    run(capsys, "pap", "init", "--store", store, "--trusted", "root")
    run(capsys, "--registry", reg, "pap", "add", "--store", store, "--as", "root",
        "--policy", site / "orders.policy", "--sign-key", site / "root.key")
    req = DecisionRequest(
        (attr("subject.id", "alice"), attr("action.id", "read"), attr("subject.claim.urn:role", "engineer")),
        ("/orders/1", "/other"),
    )
    (site / "req.json").write_bytes(canonicalize(req.to_doc()))
    code, out, _ = run(capsys, "--registry", reg, "pdp", "decide", "--store", store, "--request", site / "req.json", "--now", 9)
    lib = PDP(PolicyStore.open(store, KeyRegistry.load(reg), FrozenClock(9))).decide(req)
    assert code == EXIT_OK
    assert canonical(out) == lib.to_doc()
    assert canonical(out)["results"]["/orders/1"]["decision"] == "Permit"
    assert "trace" in canonical(out)

    code, out, _ = run(capsys, "--format", "table", "--registry", reg, "pdp", "decide", "--store", store,
                       "--request", site / "req.json")
    assert "Permit" in out and "NotApplicable" in out


# -- sts -------------------------------------------------------------------------


def lib_broker(site, bid, seed):
    reg = KeyRegistry.load(site / "registry.json")
    clock = FrozenClock(NOW)
    return IdentityBroker.from_config(
        parse((site / f"{bid}.broker").read_bytes()), read_key_file(site / f"{bid}.key"),
        registry=reg, clock=clock, events=EventLog(clock), seed=seed.encode(),
    )


def test_sts_issue_pairs_with_library(capsys, site):
    code, out, _ = run(capsys, *sts(site, "issue", "--broker", site / "IB2.broker", "--key", site / "IB2.key",
                                    "--context", "F1", "--subject", "alice", "--secret", "s3cret",
                                    "--seed", "s", "--now", NOW))
    assert code == EXIT_OK
    issued = lib_broker(site, "IB2", "s").issue_token(TokenRequest.issue("F1", Credential.shared_secret("alice", "s3cret")))
    doc = canonical(out)
    assert doc["token"] == issued.token.armor()
    assert doc["proof_key"] == b64e(issued.proof_key_private)


def issue_to_file(capsys, site, bid="IB2"):
    code, out, _ = run(capsys, *sts(site, "issue", "--broker", site / f"{bid}.broker", "--key", site / f"{bid}.key",
                                    "--context", "F1", "--subject", "alice", "--secret", "s3cret",
                                    "--seed", "s", "--now", NOW))
    assert code == EXIT_OK
    path = site / "token.txt"
    path.write_text(canonical(out)["token"])
    return path


def test_sts_validate_cross_broker(capsys, site):
    token = issue_to_file(capsys, site)
    code, out, _ = run(capsys, *sts(site, "validate", "--broker", site / "IB1.broker", "--key", site / "IB1.key",
                                    "--context", "F1", "--token", token, "--now", NOW))
    assert code == EXIT_OK
    lib = lib_broker(site, "IB1", "x").validate_token(token.read_text(), "F1")
    assert canonical(out) == lib.to_doc() and lib.valid


def test_sts_validate_untrusted_issuer_exit_1(capsys, site):
    token = issue_to_file(capsys, site, "IB1")
    code, out, err = run(capsys, *sts(site, "validate", "--broker", site / "IB2.broker", "--key", site / "IB2.key",
                                      "--context", "F1", "--token", token, "--now", NOW))
    assert code == EXIT_DENIED
    assert canonical(out)["reason"] == "untrusted-issuer" and "untrusted-issuer" in err


def test_sts_validate_tampered_token_is_bad_signature(capsys, site):
    token = issue_to_file(capsys, site)
    from soasec.core.model import SignedDocument

    env = SignedDocument.unarmor(token.read_text())
    body = parse(env.body)
    body["subject"] = "mallory"
    forged = SignedDocument(canonicalize(body), env.signer_id, env.signature)
    token.write_bytes(forged.to_bytes())
    code, out, _ = run(capsys, *sts(site, "validate", "--broker", site / "IB1.broker", "--key", site / "IB1.key",
                                    "--context", "F1", "--token", token, "--now", NOW))
    assert code == EXIT_DENIED
    assert canonical(out)["reason"] == "bad-signature"


def test_sts_exchange(capsys, site):
    token = issue_to_file(capsys, site, "IB1")
    code, out, _ = run(capsys, *sts(site, "exchange", "--broker", site / "IB1.broker", "--key", site / "IB1.key",
                                    "--context", "F1", "--target", "F2", "--token", token, "--seed", "e", "--now", NOW))
    assert code == EXIT_OK
    lib = lib_broker(site, "IB1", "e").exchange_token(token.read_text(), "F2", "F1")
    assert canonical(out)["token"] == lib.token.armor()
    assert [c.name for c in lib.token.claims] == ["urn:f2:role"]

    # same context: nothing maps the already-transformed claims, so nothing is issued
    code, out, _ = run(capsys, *sts(site, "exchange", "--broker", site / "IB1.broker", "--key", site / "IB1.key",
                                    "--context", "F1", "--target", "F1", "--token", token, "--now", NOW))
    assert code == EXIT_DENIED and canonical(out)["valid"] is False


def test_sts_bad_secret_and_bad_config(capsys, site):
    code, _, _ = run(capsys, *sts(site, "issue", "--broker", site / "IB1.broker", "--key", site / "IB1.key",
                                  "--context", "F1", "--subject", "alice", "--secret", "nope"))
    assert code == EXIT_DENIED
    (site / "junk.broker").write_text("{not json")
    code, _, err = run(capsys, *sts(site, "issue", "--broker", site / "junk.broker", "--key", site / "IB1.key",
                                    "--context", "F1", "--subject", "alice", "--secret", "s3cret"))
    assert code == EXIT_USAGE and err


# -- gateway ---------------------------------------------------------------------


def test_derive_cep_pairs_with_library(capsys, tmp_path):
    ingress = standard_bundle("org1").ecp("ingress")
    (tmp_path / "ecp.json").write_bytes(canonicalize(ingress.to_doc()))
    code, out, _ = run(capsys, "gateway", "derive-cep", "--ecp", tmp_path / "ecp.json")
    assert code == EXIT_OK
    assert canonical(out) == derive_cep(ECP.from_doc(ingress.to_doc())).to_doc()


@pytest.fixture()
def instance(site):
    """An instance config for org1 using the standard egress/ingress bundle."""
    store = site / "store"
    PolicyStore.init(store, ["root"])
    from pdp_fixtures import signed

    (store / "root" / "engineers.policy").write_bytes(signed(AuthzPolicy.from_body(permit_role("engineers", "/orders")), "root").to_bytes())
    (site / "bundle.json").write_bytes(canonicalize(standard_bundle("org1").to_doc()))
    config = {
        "bundle": "bundle.json",
        "id": "GW1",
        "now": NOW,
        "services": {
            "inproc://org1/keystore": {"kind": "keystore", "master": "org1", "names": ["k1"]},
            "inproc://org1/pdp": {"kind": "pdp", "store": "store"},
            "inproc://org1/sts": {"kind": "broker", "config": "IB1.broker", "key": "IB1.key", "seed": "gw"},
        },
        "state": "gw1.state",
    }
    (site / "gw1.json").write_bytes(canonicalize(config))
    return site


def outbound(path: Path) -> Message:
    msg = Message(
        "outbound",
        {"action": "read", "context-reference": "F1", "correlation-id": "c1", "resource": "/orders/1"},
        {"request": {"action": "read", "resource": "/orders/1", "subject": "alice"}},
        {"credential": dict(CREDENTIAL)},
    )
    path.write_bytes(msg.to_bytes())
    return msg


def lib_gateway(site) -> GatewayInstance:
    clock = FrozenClock(NOW)
    events = EventLog(clock)
    reg = KeyRegistry.load(site / "registry.json")
    broker = IdentityBroker.from_config(parse((site / "IB1.broker").read_bytes()), read_key_file(site / "IB1.key"),
                                        registry=reg, clock=clock, events=events, seed=b"gw")
    services = ServiceDirectory({
        "inproc://org1/sts": broker,
        "inproc://org1/pdp": PDP(PolicyStore.open(site / "store", reg, clock), clock=clock, events=events),
        "inproc://org1/keystore": KeyStore.derived(b"org1", ["k1"]),
    })
    gw = GatewayInstance("GW1", services, events, clock)
    gw.load(PolicyBundle.from_doc(parse((site / "bundle.json").read_bytes())))
    gw.activate()
    return gw


def test_gateway_run_pairs_with_library(capsys, instance):
    msg = outbound(instance / "msg.json")
    reg = instance / "registry.json"
    code, out, _ = run(capsys, "--registry", reg, "gateway", "run", "--instance", instance / "gw1.json",
                       "--message", instance / "msg.json")
    assert code == EXIT_OK
    lib = lib_gateway(instance).process(msg)
    assert canonical(out) == lib.to_doc()
    assert canonical(out)["outcome"] == "forwarded"

    # the signed, token-bearing message goes back in as the inbound leg
    wire = Message.from_doc(canonical(out)["message"]).forwarded("inbound")
    (instance / "in.json").write_bytes(wire.to_bytes())
    code, out, _ = run(capsys, "--registry", reg, "gateway", "run", "--instance", instance / "gw1.json",
                       "--message", instance / "in.json")
    assert code == EXIT_OK, out
    assert [s[2] for s in canonical(out)["steps"]] == ["ok", "ok", "ok", "ok"]


def test_gateway_run_rejection_is_exit_1(capsys, instance):
    bare = Message("inbound", {"correlation-id": "c2", "resource": "/orders/1"}, {"request": {}})
    (instance / "bare.json").write_bytes(bare.to_bytes())
    code, out, err = run(capsys, "--registry", instance / "registry.json", "gateway", "run",
                         "--instance", instance / "gw1.json", "--message", instance / "bare.json")
    assert code == EXIT_DENIED
    assert canonical(out) == lib_gateway(instance).process(bare).to_doc()
    assert canonical(out)["reason"].startswith("token")


def test_gateway_lifecycle_persists_and_rolls_back(capsys, instance):
    reg = instance / "registry.json"
    cfg = instance / "gw1.json"
    v2 = PolicyBundle.from_doc(dict(standard_bundle("org1").to_doc(), version="v2"))
    (instance / "v2.json").write_bytes(canonicalize(v2.to_doc()))

    def op(*rest):
        return run(capsys, "--registry", reg, "gateway", "lifecycle", "--instance", cfg, *rest)

    code, out, _ = op("--op", "load")
    assert code == EXIT_OK and canonical(out) == {"op": "load", "status": "created", "version": "standard"}
    assert canonical(op("--op", "activate")[1])["status"] == "active"
    code, out, _ = op("--op", "load", "--bundle", instance / "v2.json")
    assert canonical(out)["version"] == "v2"
    code, out, _ = op("--op", "rollback")
    assert code == EXIT_OK and canonical(out)["version"] == "standard"
    code, out, _ = op("--op", "destroy")
    assert code == EXIT_DENIED  # destroying an active instance is illegal
    assert canonical(out)["status"] == "active"


def test_gateway_missing_flags(capsys, tmp_path):
    assert run(capsys, "gateway", "run")[0] == EXIT_USAGE
    assert run(capsys, "gateway", "derive-cep")[0] == EXIT_USAGE
    assert run(capsys, "gateway", "lifecycle", "--op", "nonsense")[0] == EXIT_USAGE


# -- scenario --------------------------------------------------------------------


def test_scenario_matrix_three_org(capsys):
    code, out, _ = run(capsys, "scenario", "run", THREE_ORG, "--matrix", "F1")
    assert code == EXIT_OK
    doc = canonical(out)
    assert doc == load_scenario(THREE_ORG).validity_matrix("F1").to_doc()
    assert doc["accepts"] == {"IB1": ["IB1", "IB2", "IB3"], "IB2": ["IB1", "IB2"], "IB3": ["IB1", "IB3"]}


def test_scenario_matrix_table(capsys):
    code, out, _ = run(capsys, "--format", "table", "scenario", "run", THREE_ORG, "--matrix", "F1")
    assert code == EXIT_OK
    assert out.splitlines() == [
        "issuer \\ validator  IB1  IB2  IB3",
        "IB1                 yes  yes  yes",
        "IB2                 yes  yes  no",
        "IB3                 yes  no   yes",
    ]


def test_scenario_run_writes_transcripts_and_events(capsys, tmp_path):
    code, out, _ = run(capsys, "scenario", "run", THREE_ORG, "--until", "r2",
                       "--transcripts", tmp_path / "t.log", "--events", tmp_path / "e.log")
    assert code == EXIT_OK
    lib = load_scenario(THREE_ORG).run_script(until="r2")
    assert canonical(out)["results"] == [
        {"id": t.request.id, "outcome": t.outcome, "reason": t.reason, "stage": t.stage} for t in lib
    ]
    assert (tmp_path / "t.log").read_bytes() == b"".join(t.to_lines() for t in lib)
    assert all(parse(line) for line in (tmp_path / "e.log").read_bytes().splitlines())


def test_scenario_errors_are_usage(capsys, tmp_path):
    assert run(capsys, "scenario", "run", tmp_path / "missing")[0] == EXIT_USAGE
    assert run(capsys, "scenario", "run", THREE_ORG, "--matrix", "F9")[0] == EXIT_USAGE
    assert run(capsys, "scenario", "run", THREE_ORG, "--until", "r99")[0] == EXIT_USAGE
    code, out, err = run(capsys, "nonsense")
    assert code == EXIT_USAGE and out == "" and err


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == EXIT_OK

from __future__ import annotations

import threading

import pytest
from gateway_fixtures import CREDENTIAL, bundle, ecp, make_world, message, orders_policy, usp

from soasec.core.audit import EventType
from soasec.core.canonical import canonicalize
from soasec.core.model import EndpointReference
from soasec.gateway import (
    IRP,
    ActionType,
    AssertionKind,
    Effect,
    IllegalTransition,
    InvalidBundle,
    IRPEntry,
    Status,
    Step,
    UnmappedAction,
    UtilitySpec,
    assemble_chain,
    client_ecp,
    derive_cep,
)
from soasec.pdp import Obligation

TOKEN_STEP = Step(ActionType.VALIDATE_TOKEN, {"context": "F1", "issuers": ["IB1"]})
AUTHZ_STEP = Step(ActionType.AUTHORIZE, {"action": "read", "resource": "/orders/1"})


def client_and_provider(world, provider_ecp):
    provider = world.gateway("provider", bundle(provider_ecp))
    client = world.gateway("client", bundle(client_ecp(derive_cep(provider_ecp))))
    return client, provider


def send(client, provider, msg):
    msg.annotations["credential"] = dict(CREDENTIAL)
    out = client.process(msg)
    assert out.forwarded, out.reason
    return provider.process(out.message.forwarded())


# -- selection -------------------------------------------------------------------


def test_empty_chain_forwards_identical_message():
    w = make_world()
    gw = w.gateway(bundle_=bundle(ecp("any")))
    msg = message()
    res = gw.process(msg)
    assert res.forwarded and res.ecp_id == "any"
    assert res.message.to_doc() == msg.to_doc()
    assert res.trace == ()


def test_predicate_on_context_reference():
    w = make_world()
    gw = w.gateway(bundle_=bundle(ecp("f1", predicate=[("header.context-reference", "equals", "F1")])))
    assert gw.process(message(context_reference="F1")).forwarded
    res = gw.process(message(context_reference="F2"))
    assert not res.forwarded and res.reason == "no-policy"


def test_lowest_id_wins_and_ambiguity_is_audited():
    w = make_world()
    a = ecp("a", Step(ActionType.ROUTE, {"next_hop": "inproc://a"}))
    b = ecp("b", Step(ActionType.ROUTE, {"next_hop": "inproc://b"}))
    for order in ([a, b], [b, a]):
        gw = w.gateway(bundle_=bundle(*order))
        res = gw.process(message())
        assert res.ecp_id == "a" and res.message.annotations["route"] == "inproc://a"
    last = w.events.of_type(EventType.MESSAGE_PROCESSED)[-1]
    assert last.payload["ambiguous"] == "a,b"


# -- chain assembly ----------------------------------------------------------------


def test_assembled_chain_follows_step_order():
    schema = {"schema": {"id": "s", "required": ["/body/order"]}}
    e = ecp("e", Step(ActionType.VALIDATE_STRUCTURE, schema), TOKEN_STEP, AUTHZ_STEP)
    chain = assemble_chain(e, IRP.standard(sts="sts", pdp="pdp"))
    assert [c.action for c in chain] == [ActionType.VALIDATE_STRUCTURE, ActionType.VALIDATE_TOKEN, ActionType.AUTHORIZE]


def test_irp_gap_is_unmapped_and_rejected_at_load():
    w = make_world()
    e = ecp("e", Step(ActionType.DECRYPT_ELEMENTS, {"paths": ["/body/order"], "key": "k1"}))
    partial = IRP({a: x for a, x in IRP.standard(keystore="keystore").entries.items() if a is not ActionType.DECRYPT_ELEMENTS})
    with pytest.raises(UnmappedAction):
        assemble_chain(e, partial)
    gw = w.gateway()
    with pytest.raises(InvalidBundle, match="no interceptor"):
        gw.load(bundle(e, irp=partial))
    assert gw.bundle is None


def test_implementation_must_match_action():
    w = make_world()
    entries = dict(IRP.standard().entries)
    entries[ActionType.ROUTE] = IRPEntry("std/audit-emit")
    with pytest.raises(InvalidBundle):
        w.gateway().load(bundle(ecp("e", Step(ActionType.ROUTE, {"next_hop": "inproc://x"})), irp=IRP(entries)))


def test_bad_interceptor_config_is_invalid_bundle():
    w = make_world()
    with pytest.raises(InvalidBundle):
        w.gateway().load(bundle(ecp("e", Step(ActionType.SIGN_ELEMENTS, {"paths": []}))))


def test_false_condition_skips_and_indeterminate_rejects():
    w = make_world()
    cond = {"attr": "header.priority", "cmp": "eq", "value": "high"}
    e = ecp("e", Step(ActionType.ROUTE, {"next_hop": "inproc://fast"}, cond), Step(ActionType.AUDIT_EMIT))
    gw = w.gateway(bundle_=bundle(e))
    res = gw.process(message(priority="low"))
    assert res.forwarded and [t.status for t in res.trace] == ["skipped", "ok"]
    assert "route" not in res.message.annotations
    res = gw.process(message(priority="high"))
    assert res.message.annotations["route"] == "inproc://fast"
    res = gw.process(message())  # header absent: comparison is indeterminate
    assert not res.forwarded and res.reason == "condition-indeterminate" and res.failed_step == "e#0"


# -- tokens, signatures, authorization ------------------------------------------------


def test_bad_token_rejected_at_validate_token_with_event():
    w = make_world()
    gw = w.gateway(bundle_=bundle(ecp("e", TOKEN_STEP)))
    res = gw.process(message(token="garbage", context_reference="F1"))
    assert not res.forwarded and res.failed_step == "e#0" and res.reason == "token:malformed"
    assert w.events.of_type(EventType.TOKEN_REJECTED)[-1].payload["reason"] == "malformed"
    assert gw.process(message()).reason == "token:missing"


def test_client_from_cep_reaches_service_through_authorization():
    w = make_world()
    provider_ecp = ecp(
        "orders",
        TOKEN_STEP,
        Step(ActionType.VERIFY_ELEMENTS, {"paths": ["/body/order/id", "/body/customer"]}),
        AUTHZ_STEP,
    )
    client, provider = client_and_provider(w, provider_ecp)
    res = send(client, provider, message())
    assert res.forwarded, res.reason
    assert res.message.annotations["decision"] == {"/orders/1": "Permit"}
    assert res.message.annotations["assertions"] == ["orders#0", "orders#1"]
    assert res.message.annotations["subject"] == "alice"


def test_signature_covers_value():
    w = make_world()
    provider_ecp = ecp("orders", TOKEN_STEP, Step(ActionType.VERIFY_ELEMENTS, {"paths": ["/body/order/qty"]}))
    client, provider = client_and_provider(w, provider_ecp)
    msg = message()
    msg.annotations["credential"] = dict(CREDENTIAL)
    out = client.process(msg).message.forwarded()
    out.set("/body/order/qty", 300)
    res = provider.process(out)
    assert res.reason == "verify:bad-signature:/body/order/qty"


def test_deny_and_obligations():
    w = make_world(orders_policy(obligations=(Obligation("add-header", {"name": "x-audited", "value": "yes"}),)))
    provider_ecp = ecp("orders", TOKEN_STEP, AUTHZ_STEP)
    client, provider = client_and_provider(w, provider_ecp)
    res = send(client, provider, message())
    assert res.forwarded and res.message.headers["x-audited"] == "yes"

    w = make_world(orders_policy(obligations=(Obligation("shred"),)))
    client, provider = client_and_provider(w, provider_ecp)
    res = send(client, provider, message())
    assert res.reason == "obligation:unknown:shred"

    w = make_world(orders_policy(effect="Deny"))
    client, provider = client_and_provider(w, provider_ecp)
    res = send(client, provider, message())
    assert res.reason == "authz:Deny" and res.failed_step == "orders#1"


def test_require_assertion_obligation_links_cep():
    ob = Obligation("require-assertion", cep_assertion_ref="orders#1")
    w = make_world(orders_policy(obligations=(ob,)))
    signed_ecp = ecp("orders", TOKEN_STEP, Step(ActionType.VERIFY_ELEMENTS, {"paths": ["/body/order"]}), AUTHZ_STEP)
    client, provider = client_and_provider(w, signed_ecp)
    assert send(client, provider, message()).forwarded
    unsigned_ecp = ecp("orders", TOKEN_STEP, AUTHZ_STEP)
    client, provider = client_and_provider(w, unsigned_ecp)
    assert send(client, provider, message()).reason == "obligation:unsatisfied:orders#1"


def test_element_encryption_round_trip_and_binding():
    w = make_world()
    provider_ecp = ecp("e", Step(ActionType.DECRYPT_ELEMENTS, {"paths": ["/body/order/note", "/body/customer/name"], "key": "k1"}))
    client, provider = client_and_provider(w, provider_ecp)
    sent = client.process(message()).message.forwarded()
    assert sent.get("/body/order/note")["alg"] == "aes-siv"
    assert "rush" not in canonicalize(sent.wire()).decode()
    assert provider.process(sent).message.body == message().body

    swapped = sent.copy()
    swapped.set("/body/order/note", sent.get("/body/customer/name"))
    swapped.set("/body/customer/name", sent.get("/body/order/note"))
    assert provider.process(swapped).reason == "decrypt:failed:/body/order/note"
    assert provider.process(message()).reason == "decrypt:not-encrypted:/body/order/note"


# -- nesting and state ---------------------------------------------------------------


def test_nested_policy_runs_inline_and_depth_is_capped():
    w = make_world()
    inner = ecp("z-inner", Step(ActionType.ROUTE, {"next_hop": "inproc://deep"}))
    outer = ecp("a-outer", Step(ActionType.INVOKE_POLICY, {"policy": "z-inner"}), Step(ActionType.AUDIT_EMIT))
    res = w.gateway(bundle_=bundle(outer, inner)).process(message())
    assert res.forwarded and res.message.annotations["route"] == "inproc://deep"
    assert [(t.ecp, t.action) for t in res.trace] == [("z-inner", "route"), ("a-outer", "invoke-policy"), ("a-outer", "audit-emit")]

    loop = ecp("loop", Step(ActionType.INVOKE_POLICY, {"policy": "loop"}))
    res = w.gateway(bundle_=bundle(loop), nesting_cap=2).process(message())
    assert not res.forwarded and res.reason == "nesting-limit"

    chain = [ecp(f"n{i}", Step(ActionType.INVOKE_POLICY, {"policy": f"n{i + 1}"})) for i in range(4)] + [ecp("n4")]
    assert w.gateway(bundle_=bundle(*chain), nesting_cap=4).process(message()).forwarded
    assert w.gateway(bundle_=bundle(*chain), nesting_cap=3).process(message()).reason == "nesting-limit"


def test_unknown_nested_policy_rejected_at_load():
    w = make_world()
    with pytest.raises(InvalidBundle, match="unknown policy"):
        w.gateway().load(bundle(ecp("e", Step(ActionType.INVOKE_POLICY, {"policy": "nope"}))))


def test_state_conditions_and_effects():
    w = make_world()
    count = Effect("count", "incr")
    e = ecp(
        "e",
        Step(ActionType.AUDIT_EMIT, effects=(count,)),
        Step(ActionType.ROUTE, {"next_hop": "inproc://first-two"}, {"attr": "state.count", "cmp": "le", "value": 2}),
        state={"count": 0},
    )
    gw = w.gateway(bundle_=bundle(e))
    routes = ["route" in gw.process(message()).message.annotations for _ in range(4)]
    assert routes == [True, True, False, False]
    assert gw.state("e") == {"count": 4}


def test_effects_of_rejected_message_still_commit_only_declared_vars():
    w = make_world()
    e = ecp(
        "e",
        Step(ActionType.AUDIT_EMIT, effects=(Effect("seen", "incr"),)),
        Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, effects=(Effect("ok", "incr"),)),
        state={"seen": 0, "ok": 0},
    )
    gw = w.gateway(bundle_=bundle(e))
    assert not gw.process(message()).forwarded
    assert gw.state("e") == {"seen": 1, "ok": 0}


def test_undeclared_effect_is_invalid():
    w = make_world()
    with pytest.raises(InvalidBundle, match="undeclared"):
        w.gateway().load(bundle(ecp("e", Step(ActionType.AUDIT_EMIT, effects=(Effect("x", "set", 1),)))))


def test_concurrent_messages_do_not_share_annotations():
    w = make_world()
    tag = Step(ActionType.TRANSFORM, {"set": {"/body/seen": True}})
    gw = w.gateway(bundle_=bundle(ecp("e", tag, Step(ActionType.AUDIT_EMIT, effects=(Effect("n", "incr"),)), state={"n": 0})))
    results = {}

    def worker(k):
        msg = message(correlation_id=f"c{k}")
        msg.annotations["mine"] = k
        results[k] = gw.process(msg)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, res in results.items():
        assert res.message.annotations == {"mine": k}
        assert res.message.correlation_id == f"c{k}"
    assert 1 <= gw.state("e")["n"] <= 32


# -- utilities ----------------------------------------------------------------------


class Flaky:
    def __init__(self, inner, failures):
        self.inner, self.failures = inner, failures

    def __getattr__(self, name):
        attr = getattr(self.inner, name)

        def call(*a, **kw):
            if self.failures > 0:
                self.failures -= 1
                raise ConnectionError("transient")
            return attr(*a, **kw)

        return call


def test_usp_retries_then_fails_closed():
    ks_step = Step(ActionType.DECRYPT_ELEMENTS, {"paths": ["/body/order"], "key": "k1"})
    for retries, failures, ok in [(1, 1, True), (0, 1, False), (2, 3, False)]:
        w = make_world()
        client, _ = client_and_provider(w, ecp("e", ks_step))
        sent = client.process(message()).message.forwarded()
        w.services.bind("inproc://flaky-ks", Flaky(w.keystore, failures))
        spec = UtilitySpec(EndpointReference("inproc://flaky-ks"), "keystore", retries=retries)
        gw = w.gateway("p2", bundle(ecp("e", ks_step), usp_=usp(keystore=spec)))
        res = gw.process(sent)
        assert res.forwarded is ok
        if not ok:
            assert res.reason == "utility-unavailable:keystore"


def test_usp_timeout_fails_step():
    import time

    class Slow:
        def key(self, name):
            time.sleep(0.5)
            return b"x" * 64

    w = make_world()
    w.services.bind("inproc://slow", Slow())
    spec = UtilitySpec(EndpointReference("inproc://slow"), "keystore", timeout=0.05)
    gw = w.gateway(bundle_=bundle(ecp("e", Step(ActionType.ENCRYPT_ELEMENTS, {"paths": ["/body/order"], "key": "k1"})), usp_=usp(keystore=spec)))
    assert gw.process(message()).reason == "utility-unavailable:keystore"


def test_usp_interface_and_endpoint_checked_at_load():
    w = make_world()
    wrong = usp(sts=UtilitySpec(EndpointReference("inproc://pdp/org1"), "pdp"))
    with pytest.raises(InvalidBundle, match="not a sts"):
        w.gateway().load(bundle(ecp("e", TOKEN_STEP), usp_=wrong))
    unbound = usp(sts=UtilitySpec(EndpointReference("inproc://nowhere"), "sts"))
    with pytest.raises(InvalidBundle, match="nothing bound"):
        w.gateway().load(bundle(ecp("e", TOKEN_STEP), usp_=unbound))
    with pytest.raises(InvalidBundle, match="dangling"):
        w.gateway().load(bundle(ecp("e", Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, usp_ref="ghost"))))


# -- capability exposure ---------------------------------------------------------------


def test_cep_has_one_assertion_per_dual():
    e = ecp("orders", TOKEN_STEP, Step(ActionType.VERIFY_ELEMENTS, {"paths": ["/body/order"]}))
    cep = derive_cep(e)
    assert [(a.id, a.kind) for a in cep.assertions] == [("orders#0", AssertionKind.TOKEN), ("orders#1", AssertionKind.SIGN)]
    assert cep.assertions[0].requirement == {"context": "F1", "issuers": ["IB1"]}
    assert derive_cep(ecp("x", Step(ActionType.ROUTE, {"next_hop": "inproc://n"}), Step(ActionType.AUDIT_EMIT))).assertions == ()


def test_cep_is_deterministic_and_keeps_secrets():
    e = ecp(
        "orders",
        Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, usp_ref="sts"),
        Step(ActionType.DECRYPT_ELEMENTS, {"paths": ["/body/order"], "key": "k1"}, usp_ref="keystore"),
        AUTHZ_STEP,
        Step(ActionType.ROUTE, {"next_hop": "inproc://backend"}),
    )
    text = derive_cep(e).to_bytes()
    assert text == derive_cep(e).to_bytes()
    for secret in (b"std/", b"inproc://", b"keystore", b"sts", b"usp", b"/orders/1"):
        assert secret not in text


# -- lifecycle ----------------------------------------------------------------------


def test_lifecycle_transitions_and_events():
    w = make_world()
    gw = w.gateway()
    with pytest.raises(IllegalTransition):
        gw.activate()
    gw.load(bundle(ecp("e")))
    assert gw.status is Status.CREATED
    assert gw.process(message()).reason == "instance-inactive"
    gw.activate()
    with pytest.raises(IllegalTransition):
        gw.destroy()
    gw.deactivate()
    assert gw.process(message()).reason == "instance-inactive"
    gw.activate()
    gw.deactivate()
    gw.destroy()
    assert gw.process(message()).reason == "instance-destroyed"
    for op in (gw.activate, gw.deactivate, gw.rollback, lambda: gw.load(bundle(ecp("e")))):
        with pytest.raises(IllegalTransition):
            op()
    ops = [e.payload["op"] for e in w.events.of_type(EventType.CONFIG_CHANGED) if e.origin == "gw1"]
    assert ops == ["load", "activate", "deactivate", "activate", "deactivate", "destroy"]


def test_invalid_load_keeps_serving_and_rollback_restores():
    w = make_world()
    v1 = bundle(ecp("e", Step(ActionType.ROUTE, {"next_hop": "inproc://v1"})), version="v1")
    v2 = bundle(ecp("e", Step(ActionType.ROUTE, {"next_hop": "inproc://v2"})), version="v2")
    gw = w.gateway(bundle_=v1)
    with pytest.raises(IllegalTransition):
        gw.rollback()
    bad = bundle(ecp("e", Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, usp_ref="ghost")), version="bad")
    with pytest.raises(InvalidBundle):
        gw.load(bad)
    assert gw.history == ("v1",)
    assert gw.process(message()).message.annotations["route"] == "inproc://v1"
    gw.load(v2)
    assert gw.status is Status.ACTIVE
    assert gw.process(message()).message.annotations["route"] == "inproc://v2"
    gw.rollback()
    assert gw.history == ("v1",)
    assert gw.process(message()).message.annotations["route"] == "inproc://v1"


def test_chain_determinism():
    outcomes = []
    for _ in range(2):
        w = make_world()
        provider_ecp = ecp("orders", TOKEN_STEP, Step(ActionType.VERIFY_ELEMENTS, {"paths": ["/body/order"]}), AUTHZ_STEP)
        client, provider = client_and_provider(w, provider_ecp)
        res = send(client, provider, message(correlation_id="fixed"))
        outcomes.append(canonicalize(res.to_doc()))
    assert outcomes[0] == outcomes[1]

"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal output) or directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import io
import itertools
import random
import sys
from contextlib import redirect_stdout
from pathlib import Path

import pytest
from broker_fixtures import NOW
from gateway_cases import cep_soundness_case, composite_outcomes, prepared
from gateway_fixtures import bundle, ecp, make_world
from gateway_gen import random_message, random_provider_ecp
from harness_fixtures import SCENARIOS, golden_bytes
from oracles import oracle_agrees, reference_combine, reference_firings

from soasec.broker import (
    ClaimValidityRule,
    Credential,
    FederationContext,
    FederationSelector,
    IdentityBroker,
    InternalIdentity,
    PartnerDescriptor,
    ProviderConfig,
    TokenRequest,
    TransformRule,
)
from soasec.cli import main as cli_main
from soasec.core.audit import EventLog, EventType, FrozenClock
from soasec.core.canonical import canonicalize, parse_strict
from soasec.core.crypto import KeyRegistry, derive_keypair
from soasec.core.model import attr
from soasec.gateway import ActionType, Effect, InvalidBundle, Step, derive_cep
from soasec.harness import AdaptationEngine, AdaptationRule, Scenario, grid_doc
from soasec.pdp import PDP, CombiningAlg, Decision, combine

THREE_ORG_SCENARIO = SCENARIOS / "three_org.scenario"


@pytest.fixture()
def report(capsys):
    """Print one line per criterion to the real terminal, even under capture."""

    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            sys.stdout.write(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})\n")

    return emit


# 1 --------------------------------------------------------------------------------

THREE_ORG_ACCEPTS = {"IB1": ["IB1", "IB2", "IB3"], "IB2": ["IB1", "IB2"], "IB3": ["IB1", "IB3"]}
THREE_ORG_TABLE = [
    "issuer \\ validator  IB1  IB2  IB3",
    "IB1                 yes  yes  yes",
    "IB2                 yes  yes  no",
    "IB3                 yes  no   yes",
]


def _cli(*argv: str) -> tuple[int, str]:
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli_main(list(argv))
    return code, buf.getvalue()


def test_criterion_1_three_org_trust_matrix(report):
    code, out = _cli("scenario", "run", str(THREE_ORG_SCENARIO), "--matrix", "F1")
    doc = parse_strict(out.rstrip("\n").encode("utf-8")) if code == 0 else {}
    matrix = doc.get("matrix", {})
    exact = code == 0 and doc.get("accepts") == THREE_ORG_ACCEPTS and all(
        matrix[i][v] == (i in THREE_ORG_ACCEPTS[v]) for i in THREE_ORG_ACCEPTS for v in THREE_ORG_ACCEPTS
    )
    tcode, table = _cli("--format", "table", "scenario", "run", str(THREE_ORG_SCENARIO), "--matrix", "F1")
    exact = exact and tcode == 0 and table.splitlines() == THREE_ORG_TABLE
    report(1, "federation validity matrix via CLI", exact, "exact 3x3 match" if exact else out.strip())
    assert exact


# 2 --------------------------------------------------------------------------------

ORACLE_STORES = 1000


def test_criterion_2_delegation_oracle(report):
    failures = []
    for seed in range(ORACLE_STORES):
        ok, why = oracle_agrees(random.Random(seed), lambda req, store, prov: PDP(store, prov).decide(req))
        if not ok:
            failures.append((seed, why))
    agree = ORACLE_STORES - len(failures)
    report(2, "delegation oracle equivalence", not failures, f"{agree}/{ORACLE_STORES} stores agree")
    assert not failures, failures[:5]


# 3 --------------------------------------------------------------------------------

ALL = list(Decision)


def test_criterion_3_combining_tables(report):
    checked, mismatches = 0, []
    for alg in CombiningAlg:
        for n in range(4):
            for decisions in itertools.product(ALL, repeat=n):
                for prios in itertools.product([0, 1, 2], repeat=n):
                    items = list(zip(prios, decisions))
                    checked += 1
                    if combine(items, alg).value != reference_combine([(p, d.value) for p, d in items], alg.value):
                        mismatches.append((alg.value, items))
    # localization: a higher-priority entry that does not apply never changes the result
    local_checked, local_bad = 0, []
    for n in range(4):
        for decisions in itertools.product(ALL, repeat=n):
            for prios in itertools.product([0, 1, 2], repeat=n):
                items = list(zip(prios, decisions))
                base = combine(items, "priority-override")
                for pos in range(n + 1):
                    local_checked += 1
                    with_noop = items[:pos] + [(3, Decision.NOT_APPLICABLE)] + items[pos:]
                    if combine(with_noop, "priority-override") is not base:
                        local_bad.append(with_noop)
    ok = not mismatches and not local_bad
    report(3, "combining truth tables + localization", ok,
           f"{checked - len(mismatches)}/{checked} tuples, {local_checked - len(local_bad)}/{local_checked} localization")
    assert ok, (mismatches[:3], local_bad[:3])


# 4 --------------------------------------------------------------------------------

CONTEXTS = ("F1", "F2")
MUTATIONS = 240


def _two_brokers():
    """Brokers A and B, each in F1 and F2 and each trusting the other, with three identities."""
    clock = FrozenClock(NOW)
    events = EventLog(clock)
    keys = {b: derive_keypair(b"acceptance", b) for b in "AB"}
    registry = KeyRegistry({b: k.public for b, k in keys.items()})
    people = {
        "alice": InternalIdentity.with_secret("alice", "pa", [attr("subject.role", "engineer"), attr("subject.level", 2)]),
        "bob": InternalIdentity.with_secret("bob", "pb", [attr("subject.role", "auditor")]),
        "carol": InternalIdentity.with_secret("carol", "pc", [attr("subject.role", "manager"), attr("subject.dept", "ops")]),
    }
    rules = (TransformRule("subject.role", "urn:role"), TransformRule("subject.level", "urn:level"),
             TransformRule("subject.dept", "urn:dept"))
    brokers = {}
    for b, other in (("A", "B"), ("B", "A")):
        broker = IdentityBroker(b, keys[b], registry, clock, events, seed=f"acc-{b}".encode())
        for fid in CONTEXTS:
            providers = ProviderConfig(identities=people, transformation=rules,
                                       validity_rules=(ClaimValidityRule("has-role", "urn:role"),))
            broker.add_context(FederationContext(fid, FederationSelector.ref(fid), (PartnerDescriptor(other),), providers))
        brokers[b] = broker
    secrets = {"alice": "pa", "bob": "pb", "carol": "pc"}
    return brokers, secrets


def test_criterion_4_token_round_trip_and_tamper(report):
    brokers, secrets = _two_brokers()
    pairs, round_trip_bad, tokens = 0, [], []
    for issuer, fid, subject in itertools.product(sorted(brokers), CONTEXTS, sorted(secrets)):
        issued = brokers[issuer].issue_token(TokenRequest.issue(fid, Credential.shared_secret(subject, secrets[subject])))
        tokens.append((issued.token, fid))
        for validator in sorted(brokers):
            pairs += 1
            res = brokers[validator].validate_token(issued.token.to_bytes(), fid)
            if not (res.valid and res.claims == issued.token.claims):
                round_trip_bad.append((issuer, validator, fid, subject, res.reason))
    rng = random.Random(4)
    survived = []
    for i in range(MUTATIONS):
        token, fid = tokens[i % len(tokens)]
        armored = i % 2 == 1
        wire = bytearray(token.armor().encode("ascii") if armored else token.to_bytes())
        bit = rng.randrange(len(wire) * 8)
        wire[bit // 8] ^= 1 << (bit % 8)
        mutated = bytes(wire).decode("latin-1") if armored else bytes(wire)
        for validator in sorted(brokers):
            if brokers[validator].validate_token(mutated, fid).valid:
                survived.append((i, bit, validator))
    ok = not round_trip_bad and not survived
    report(4, "token round trip + single-bit tamper", ok,
           f"{pairs - len(round_trip_bad)}/{pairs} round trips, {MUTATIONS - len({s[0] for s in survived})}/{MUTATIONS} mutations rejected")
    assert ok, (round_trip_bad, survived[:5])


# 5 --------------------------------------------------------------------------------

CEP_CASES = 60


def test_criterion_5_cep_soundness(report):
    bad = []
    assertions = 0
    for seed in range(CEP_CASES):
        ok, leaks = cep_soundness_case(seed)
        if not ok or leaks:
            bad.append((seed, ok, leaks))
    for seed in range(CEP_CASES):
        assertions += len(derive_cep(random_provider_ecp(random.Random(seed))).assertions)
    report(5, "CEP soundness", not bad,
           f"{CEP_CASES - len(bad)}/{CEP_CASES} ECPs, {assertions} single-assertion omissions checked")
    assert not bad, bad


# 6 --------------------------------------------------------------------------------

AGGREGATION_CASES = 120


def test_criterion_6_aggregation_equivalence(report):
    bad = []
    for seed in range(1000, 1000 + AGGREGATION_CASES):
        outcomes = composite_outcomes(seed)
        if len(set(outcomes.values())) != 1:
            bad.append(seed)
    report(6, "aggregation equivalence", not bad,
           f"{AGGREGATION_CASES - len(bad)}/{AGGREGATION_CASES} pairs byte-identical across 5 topologies")
    assert not bad, bad


# 7 --------------------------------------------------------------------------------


def test_criterion_7_soundness_grid(report):
    wrong_delivery, golden_diff = [], []
    for cell in itertools.product([True, False], repeat=3):
        doc = grid_doc(*cell)
        t = Scenario(doc).run_script()[0]
        if t.delivered is not all(cell):
            wrong_delivery.append(doc["name"])
        if t.to_lines() != golden_bytes(doc["name"], t.to_lines()):
            golden_diff.append(doc["name"])
    ok = not wrong_delivery and not golden_diff
    report(7, "end-to-end soundness grid", ok,
           f"delivery only in grid-TTT: {not wrong_delivery}; golden matches {8 - len(golden_diff)}/8")
    assert ok, (wrong_delivery, golden_diff)


# 8 --------------------------------------------------------------------------------

STREAMS_PER_N = 150
TYPES = [EventType.INVALID_CLAIMS, EventType.TOKEN_REJECTED, EventType.MESSAGE_PROCESSED]


def test_criterion_8_adaptation_threshold(report):
    rng = random.Random(8)
    mismatched, fires = [], 0
    for n in (1, 2, 3, 5):
        for k in range(STREAMS_PER_N):
            stream = [
                (rng.choice(TYPES), rng.choice(["GW-B", "IB-B"]), rng.choice(["IB-A", "IB-C"]), rng.choice(["F1", "F2"]))
                for _ in range(rng.randint(0, 80))
            ]
            log = EventLog(FrozenClock(0))
            engine = AdaptationEngine([AdaptationRule("r", "invalid-claims", n, "notify-issuer", "GW-B")])
            engine.attach(log)
            for etype, origin, issuer, ctx in stream:
                log.emit(etype, origin, ctx, issuer=issuer)
            got = [(f.seq, f.issuer, f.context) for f in engine.firings]
            want = reference_firings(stream, n)
            fires += len(want)
            if got != want:
                mismatched.append((n, k))
    total = 4 * STREAMS_PER_N
    report(8, "adaptation threshold N in {1,2,3,5}", not mismatched,
           f"{total - len(mismatched)}/{total} streams exact, {fires} expected firings, zero false fires" if not mismatched
           else f"{len(mismatched)} streams differ")
    assert not mismatched, mismatched[:5]


# 9 --------------------------------------------------------------------------------

CORPUS = 20
AUTHZ_STEP = Step(ActionType.AUTHORIZE, {"action": "read", "resource": "/orders/1"})


def _versioned_ecp(version: str):
    """v1 and v2 differ in route targets, a state threshold and which paths are verified."""
    hop, limit, paths = ("inproc://v1", 12, ["/body/order"]) if version == "v1" else ("inproc://v2", 4, ["/body/customer"])
    return ecp(
        "orders",
        Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}),
        Step(ActionType.VERIFY_ELEMENTS, {"paths": paths}),
        AUTHZ_STEP,
        Step(ActionType.AUDIT_EMIT, {"note": "seen"}, effects=(Effect("n", "incr"),)),
        Step(ActionType.ROUTE, {"next_hop": hop}, {"attr": "state.n", "cmp": "lt", "value": limit}),
        predicate=[("header.service", "equals", "orders")],
        state={"n": 0},
    )


def test_criterion_9_lifecycle_rollback(report):
    world = make_world()
    v1, v2 = _versioned_ecp("v1"), _versioned_ecp("v2")
    rng = random.Random(9)
    corpus = []
    for i in range(CORPUS):
        # clients follow v1's requirements; every fourth one skips the signature
        signer = v1 if i % 4 else _versioned_ecp("v2")
        corpus.append(prepared(world, signer, random_message(rng)))

    def replay(gw):
        return [canonicalize(gw.process(m.copy()).outcome_doc()) for m in corpus]

    gw = world.gateway("pep", bundle(v1, version="v1"))
    before = replay(gw)
    fresh = world.gateway("pep-ref", bundle(v1, version="v1"))
    reference = replay(fresh)

    gw.load(bundle(v2, version="v2"))
    under_v2 = replay(gw)
    gw.rollback()
    after = replay(gw)

    bad_bundle = bundle(ecp("orders", Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, usp_ref="ghost")), version="bad")
    atomic = False
    try:
        gw.load(bad_bundle)
    except InvalidBundle:
        atomic = gw.history == ("v1",) and gw.current.bundle.version == "v1"
    gw2 = world.gateway("pep-2", bundle(v1, version="v1"))
    try:
        gw2.load(bad_bundle)
    except InvalidBundle:
        pass
    after_bad = replay(gw2)

    differs = under_v2 != before
    ok = after == before == reference and atomic and after_bad == reference and differs
    report(9, "lifecycle rollback + invalid-load atomicity", ok,
           f"{sum(a == b for a, b in zip(after, before))}/{CORPUS} v1 outcomes reproduced; "
           f"v2 changed {sum(a != b for a, b in zip(under_v2, before))}; invalid load atomic: {atomic and after_bad == reference}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))

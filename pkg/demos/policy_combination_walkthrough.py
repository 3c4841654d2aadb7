"""A worked multi-resource decision over root and delegated policies.

An illustrative example: the request and every policy value are invented for
this demo. One request names three resources; the pre-processor splits it,
each resource is decided against the active policies, and overlapping
policies are combined by priority. Run:
``python3 demos/policy_combination_walkthrough.py``.
"""

from __future__ import annotations

from soasec.core.audit import FrozenClock
from soasec.core.crypto import KeyRegistry, derive_keypair
from soasec.pdp import (
    PDP,
    AuthzPolicy,
    DecisionRequest,
    DelegationConstraint,
    PolicyStore,
    Rule,
    TargetMatcher,
    load_policy,
)

KEYS = {p: derive_keypair(b"walkthrough", p) for p in ("authority", "projects-admin")}
ENGINEER = {"attr": "subject.role", "cmp": "eq", "value": "engineer"}


def policies() -> list[tuple[AuthzPolicy, str]]:
    anchor = AuthzPolicy(
        "projects-delegation",
        "root",
        target=TargetMatcher.of(("delegate.id", "equals", "projects-admin")),
        delegation=DelegationConstraint(
            {"resource.id", "action.id", "subject.role"},
            {"deny-overrides", "permit-overrides"},
            TargetMatcher.of(("resource.id", "prefix", "/projects/")),
            max_chain_depth=1,
        ),
    )
    engineers_read = AuthzPolicy(
        "engineers-read-projects",
        "delegated",
        target=TargetMatcher.of(("resource.id", "prefix", "/projects/"), ("action.id", "equals", "read")),
        rules=(Rule("engineers", "Permit", ENGINEER),),
    )
    # outside the delegated scope: loaded, but never authorized
    overreach = AuthzPolicy(
        "engineers-read-hr",
        "delegated",
        target=TargetMatcher.of(("resource.id", "prefix", "/hr/")),
        rules=(Rule("engineers", "Permit", ENGINEER),),
    )
    freeze = AuthzPolicy(
        "beta-freeze",
        "root",
        priority=10,
        target=TargetMatcher.of(("resource.id", "prefix", "/projects/beta/")),
        rules=(Rule("freeze", "Deny"),),
    )
    return [(anchor, "authority"), (engineers_read, "projects-admin"), (overreach, "projects-admin"), (freeze, "authority")]


def main() -> None:
    registry = KeyRegistry({p: k.public for p, k in KEYS.items()})
    store = PolicyStore(registry, ["authority"], FrozenClock(0))
    for policy, signer in policies():
        load_policy(store, policy.sign(signer, KEYS[signer].private))
        print(f"loaded {policy.id:<24} kind={policy.kind.value:<10} signed by {signer}")

    resources = ["/projects/alpha/spec", "/projects/beta/plan", "/hr/salaries"]
    req = DecisionRequest.simple("alice", "read", resources, subject_role="engineer")
    response = PDP(store).decide(req)

    print("\nrequest: alice (engineer) reads", ", ".join(resources))
    for rid in resources:
        result = response.results[rid]
        print(f"\n{rid}: {result.decision.value}" + (f" (decided by {result.winner})" if result.winner else ""))
        for entry in response.trace:
            if entry.resource_id != rid:
                continue
            chain = " -> ".join(entry.chain) if entry.chain else "-"
            note = f"  [{entry.note}]" if entry.note else ""
            print(f"    {entry.policy_id:<24} {entry.decision.value:<14} chain: {chain}{note}")


if __name__ == "__main__":
    main()

"""Builders for scenario documents used by the shipped scenarios, demos and tests."""

from __future__ import annotations

from typing import Any, Iterable, Optional


def identity(subject: str, secret: str, **attributes: Any) -> dict[str, Any]:
    return {
        "attributes": [
            {"category": "subject", "id": f"subject.{k}", "value": v} for k, v in sorted(attributes.items())
        ],
        "secret": secret,
        "subject": subject,
    }


def permit_role(policy_id: str, resource_prefix: str, role: str = "engineer", effect: str = "Permit") -> dict[str, Any]:
    """A root policy: ``effect`` for holders of the role claim on a resource prefix."""
    return {
        "id": policy_id,
        "kind": "root",
        "rules": [
            {
                "condition": {"attr": "subject.claim.urn:role", "cmp": "eq", "value": role},
                "effect": effect,
                "id": f"{policy_id}-rule",
            }
        ],
        "target": [["resource.id", "prefix", resource_prefix]],
    }


def organization(
    org_id: str,
    broker: str,
    gateway: str,
    pdp_root: str,
    identities: Iterable[dict[str, Any]],
    services: Iterable[str],
    policies: Iterable[dict[str, Any]] = (),
    validity: Optional[list[list[Any]]] = None,
) -> dict[str, Any]:
    providers: dict[str, Any] = {
        "identities": list(identities),
        "transformation": [{"external": "urn:role", "internal": "subject.role"}],
    }
    if validity:
        providers["validity_rules"] = [{"clause": c} for c in validity]
    return {
        "broker": broker,
        "gateway": gateway,
        "id": org_id,
        "pdp_root": pdp_root,
        "policies": list(policies),
        "providers": providers,
        "services": list(services),
    }


def three_org_doc() -> dict[str, Any]:
    """Three brokers in one context: IB1 accepts IB2 and IB3, each of those accepts only IB1."""
    orgs = [
        organization(
            "org1", "IB1", "SMG1", "root1",
            [identity("alice", "alice-secret", role="engineer")],
            ["/design/specs"],
            [permit_role("design-engineers", "/design/")],
        ),
        organization(
            "org2", "IB2", "SMG2", "root2",
            [identity("bob", "bob-secret", role="engineer")],
            ["/ledger/q3"],
            [permit_role("ledger-engineers", "/ledger/")],
        ),
        organization(
            "org3", "IB3", "SMG3", "root3",
            [identity("carol", "carol-secret", role="engineer")],
            ["/ops/runbook"],
            [permit_role("ops-engineers", "/ops/")],
        ),
    ]
    return {
        "clock": 1_700_000_000,
        "federations": [{"edges": [["IB1", "IB2"], ["IB1", "IB3"], ["IB2", "IB1"], ["IB3", "IB1"]], "id": "F1"}],
        "keys": ["IB1", "IB2", "IB3", "root1", "root2", "root3"],
        "name": "three_org",
        "organizations": orgs,
        "script": [
            _req("r1", "org1", "org2", "alice", "/ledger/q3"),
            _req("r2", "org3", "org2", "carol", "/ledger/q3"),
            _req("r3", "org3", "org1", "carol", "/design/specs"),
            _req("r4", "org2", "org3", "bob", "/ops/runbook"),
            _req("r5", "org2", "org1", "bob", "/design/specs"),
        ],
        "seed": "three_org",
    }


def _req(rid: str, client: str, target: str, subject: str, resource: str, action: str = "read", context: str = "F1") -> dict[str, Any]:
    return {
        "action": action,
        "client": client,
        "context": context,
        "id": rid,
        "resource": resource,
        "subject": subject,
        "target": target,
    }


def grid_doc(trusted: bool, claims_valid: bool, permits: bool) -> dict[str, Any]:
    """Two organizations; one request from org-a to org-b with each factor switchable.

    trusted: IB-B accepts tokens from IB-A. claims_valid: IB-B's claims rules
    accept the role IB-A asserts. permits: org-b's policy permits that role.
    """
    validity = [["urn:role", "any-of", ["engineer", "auditor"] if claims_valid else ["auditor"]]]
    edges = [["IB-A", "IB-B"]] + ([["IB-B", "IB-A"]] if trusted else [])
    orgs = [
        organization(
            "org-a", "IB-A", "GW-A", "root-a",
            [identity("alice", "alice-secret", role="engineer")],
            [],
        ),
        organization(
            "org-b", "IB-B", "GW-B", "root-b",
            [identity("bob", "bob-secret", role="auditor")],
            ["/reports/annual"],
            [permit_role("reports", "/reports/", effect="Permit" if permits else "Deny")],
            validity,
        ),
    ]
    name = "grid-" + "".join("T" if f else "F" for f in (trusted, claims_valid, permits))
    return {
        "clock": 1_700_000_000,
        "federations": [{"edges": edges, "id": "F1", "members": ["IB-A", "IB-B"]}],
        "keys": ["IB-A", "IB-B", "root-a", "root-b"],
        "name": name,
        "organizations": orgs,
        "script": [_req("q1", "org-a", "org-b", "alice", "/reports/annual")],
        "seed": "grid",
    }


def adaptation_doc(threshold: int = 3, action: str = "notify-issuer", requests: int = 6) -> dict[str, Any]:
    """org-b rejects every org-a token on claims; a rule reacts after ``threshold`` of them."""
    doc = grid_doc(True, False, True)
    doc["name"] = "adaptation"
    doc["adaptation"] = [{"action": action, "id": "claims-watch", "org": "org-b", "threshold": threshold, "trigger": "invalid-claims"}]
    doc["script"] = [_req(f"q{i + 1}", "org-a", "org-b", "alice", "/reports/annual") for i in range(requests)]
    return doc

"""Hot-swapping an enforcement bundle and rolling it back.

A single gateway serves v1, is reconfigured to v2, refuses a broken v3, and
rolls back to v1. Run: ``python3 demos/rollback_walkthrough.py``.
"""

from __future__ import annotations

from soasec.core.audit import EventLog, FrozenClock
from soasec.gateway import (
    ECP,
    IRP,
    USP,
    ActionType,
    GatewayInstance,
    InvalidBundle,
    Message,
    PolicyBundle,
    Step,
)
from soasec.pdp import TargetMatcher


def bundle(version: str, hop: str, usp_ref: str | None = None) -> PolicyBundle:
    steps = [Step(ActionType.ROUTE, {"next_hop": hop})]
    if usp_ref is not None:
        steps.insert(0, Step(ActionType.VALIDATE_TOKEN, {"context": "F1"}, usp_ref=usp_ref))
    ecp = ECP("all", tuple(steps), TargetMatcher.of(("direction", "equals", "inbound")))
    # no utility services are bound, so a step that names one makes the bundle invalid
    return PolicyBundle(version, (ecp,), IRP.standard(), USP({}))


def route_of(gw: GatewayInstance) -> str:
    msg = Message("inbound", {"correlation-id": "demo"}, {"hello": "world"})
    return gw.process(msg).message.annotations.get("route", "-")


def main() -> None:
    clock = FrozenClock(0)
    gw = GatewayInstance("demo-gw", events=EventLog(clock), clock=clock)
    gw.load(bundle("v1", "inproc://backend-a"))
    gw.activate()
    print(f"v1 active, routes to {route_of(gw)}")
    gw.load(bundle("v2", "inproc://backend-b"))
    print(f"v2 active, routes to {route_of(gw)}")
    try:
        gw.load(bundle("v3", "inproc://backend-c", usp_ref="ghost"))
    except InvalidBundle as exc:
        print(f"v3 refused ({exc}); still serving {gw.current.bundle.version}, routes to {route_of(gw)}")
    gw.rollback()
    print(f"rolled back to {gw.current.bundle.version}, routes to {route_of(gw)}")
    print("history:", ", ".join(gw.history))


if __name__ == "__main__":
    main()

"""A provider that keeps seeing tokens with unacceptable claims reacts.

First with a notification to the issuing broker after every third rejection,
then by blocking the issuer at its own gateway after the second.
Run: ``python3 demos/adaptation_walkthrough.py``.
"""

from __future__ import annotations

from soasec.core.audit import EventType
from soasec.harness import Scenario, adaptation_doc


def main() -> None:
    notify = Scenario(adaptation_doc(threshold=3, requests=7))
    print("notify-issuer, threshold 3")
    for t in notify.run_script():
        fired = "  <- rule fired" if t.events(EventType.ADAPTATION_FIRED) else ""
        print(f"  {t.request.id}: {t.reason}{fired}")
    for req in notify.engine.requests:
        print(f"  reconfiguration request to {req.issuer} for {req.context} after {req.observed} events")

    block = Scenario(adaptation_doc(threshold=2, action="block-requester", requests=4))
    print("\nblock-requester, threshold 2")
    for t in block.run_script():
        print(f"  {t.request.id}: {t.reason}")
    print(f"  org-b blocks IB-A in F1: {block.orgs['org-b'].gateway.is_blocked('IB-A', 'F1')}")


if __name__ == "__main__":
    main()

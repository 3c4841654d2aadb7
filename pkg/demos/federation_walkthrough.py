"""Three organizations, one federation, asymmetric trust.

Prints the token validity matrix, then runs the scripted requests and shows
where each one stopped. Run: ``python3 demos/federation_walkthrough.py``.
"""

from __future__ import annotations

from pathlib import Path

from soasec.harness import load_scenario

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "three_org.scenario"


def main() -> None:
    scenario = load_scenario(SCENARIO)
    print("Who accepts whose tokens in F1:\n")
    print(scenario.validity_matrix("F1").table())
    print("\nScripted requests:\n")
    for t in scenario.run_script():
        step = t.request
        where = "delivered" if t.delivered else f"rejected at {t.stage}: {t.reason}"
        print(f"  {step.id}: {step.subject}@{step.client} -> {step.resource} on {step.target}  [{where}]")
        print(f"      milestones: {', '.join(t.actions())}")


if __name__ == "__main__":
    main()

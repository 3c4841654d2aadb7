"""Decision combining algorithms.

Truth tables (D=Deny, P=Permit, I=Indeterminate, N=NotApplicable):

deny-overrides
    any D -> D; else any I -> I; else any P -> P; else N.
permit-overrides
    any P -> P; else any I -> I; else any D -> D; else N.
first-applicable
    the first entry (input order) that is not N; N if none.
priority-override
    stable sort by priority, highest first, then as first-applicable: N entries
    are skipped, the first P or D wins, an I met before any P/D propagates.
    Skipping N is what keeps overriding local to the overlapping targets.

An empty input is N for every algorithm.
"""

from __future__ import annotations

from typing import Sequence

from soasec.pdp.model import CombiningAlg, Decision

P, D, N, I = Decision.PERMIT, Decision.DENY, Decision.NOT_APPLICABLE, Decision.INDETERMINATE


def _overrides(decisions: Sequence[Decision], strong: Decision, weak: Decision) -> tuple[Decision, list[int]]:
    for wanted in (strong, I, weak):
        hits = [i for i, d in enumerate(decisions) if d is wanted]
        if hits:
            return wanted, hits if wanted is not I else []
    return N, []


def combine_with_winners(
    items: Sequence[tuple[int, Decision]], alg: CombiningAlg | str
) -> tuple[Decision, list[int]]:
    """Combine ``(priority, decision)`` pairs.

    Returns the decision and the input indices whose decision "won" (used to
    collect obligations). Winners are empty unless the result is P or D.
    """
    alg = CombiningAlg(alg)
    decisions = [Decision(d) for _, d in items]
    if alg is CombiningAlg.DENY_OVERRIDES:
        return _overrides(decisions, D, P)
    if alg is CombiningAlg.PERMIT_OVERRIDES:
        return _overrides(decisions, P, D)
    order = list(range(len(items)))
    if alg is CombiningAlg.PRIORITY_OVERRIDE:
        order.sort(key=lambda i: -items[i][0])  # sort is stable
    for i in order:
        d = decisions[i]
        if d is N:
            continue
        return d, ([i] if d in (P, D) else [])
    return N, []


def combine(items: Sequence[tuple[int, Decision]], alg: CombiningAlg | str) -> Decision:
    return combine_with_winners(items, alg)[0]

import itertools

import pytest

from oracles import reference_combine
from soasec.pdp import CombiningAlg, Decision, combine, combine_with_winners

P, D, N, I = Decision.PERMIT, Decision.DENY, Decision.NOT_APPLICABLE, Decision.INDETERMINATE
ALL = [P, D, N, I]


@pytest.mark.parametrize("alg", list(CombiningAlg))
def test_empty_is_not_applicable(alg):
    assert combine([], alg) is N


def test_priority_override_examples():
    assert combine([(10, D), (5, P)], "priority-override") is D
    assert combine([(10, N), (5, P)], "priority-override") is P
    # order of input irrelevant, priority decides
    assert combine([(5, P), (10, D)], "priority-override") is D


def test_deny_overrides_permit_indeterminate():
    assert combine([(0, P), (0, I)], "deny-overrides") is I


@pytest.mark.parametrize("alg", list(CombiningAlg))
def test_exhaustive_up_to_three(alg):
    for n in range(4):
        for decisions in itertools.product(ALL, repeat=n):
            for prios in itertools.product([0, 1, 2], repeat=n):
                items = list(zip(prios, decisions))
                assert combine(items, alg).value == reference_combine(
                    [(p, d.value) for p, d in items], alg.value
                ), (alg, items)


def test_winners_only_for_permit_or_deny():
    assert combine_with_winners([(0, I), (0, P)], "first-applicable") == (I, [])
    assert combine_with_winners([(0, D), (0, P), (0, D)], "deny-overrides") == (D, [0, 2])
    assert combine_with_winners([(1, P), (3, D)], "priority-override") == (D, [1])


def test_priority_override_is_local():
    # a higher priority entry that does not apply never masks lower ones
    for rest in itertools.product(ALL, repeat=2):
        items = [(1, rest[0]), (0, rest[1])]
        assert combine([(9, N)] + items, "priority-override") is combine(items, "priority-override")

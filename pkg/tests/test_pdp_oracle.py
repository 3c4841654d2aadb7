import random

from hypothesis import given, settings, strategies as st

from oracles import oracle_agrees
from soasec.pdp import decide


def _decide(req, store, providers, partial=False):
    return decide(req, store, providers, now=1_000_000, partial_evaluation=partial)


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_pdp_matches_reference(seed):
    ok, why = oracle_agrees(random.Random(seed), _decide)
    assert ok, why


@settings(max_examples=150, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_partial_evaluation_matches_reference(seed):
    ok, why = oracle_agrees(random.Random(seed), lambda r, s, p: _decide(r, s, p, partial=True))
    assert ok, why

import pytest
from hypothesis import given, strategies as st

from oracles import reference_canonicalize
from soasec.core.canonical import (
    CanonicalizationError,
    canonicalize,
    is_canonical,
    parse,
    parse_strict,
)

scalars = st.none() | st.booleans() | st.integers(-(2**60), 2**60) | st.text() | st.floats(
    allow_nan=False, allow_infinity=False
)
documents = st.recursive(
    scalars,
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=20,
)


def test_empty_object_is_two_bytes():
    assert canonicalize({}) == b"{}"


def test_key_order_does_not_matter():
    assert canonicalize({"b": 1, "a": 2}) == canonicalize({"a": 2, "b": 1}) == b'{"a":2,"b":1}'


def test_nested_policy_matches_reference_serializer():
    doc = {
        "id": "p-1",
        "kind": "delegated",
        "rules": [
            {"id": "r1", "effect": "Permit", "condition": {"and": [{"cmp": "eq", "attr": "subject.role", "value": "eng"}]}},
            {"id": "r2", "effect": "Deny", "obligations": [{"id": "audit", "parameters": {"level": "hi\n\"x\""}}]},
        ],
        "target": [["resource.id", "prefix", "/docs/"], ["environment.level", "range", [0.5, None]]],
        "validity": {"not_before": 0, "not_after": 10},
        "ünïcode": "☃",
    }
    assert canonicalize(doc) == reference_canonicalize(doc)


@given(documents)
def test_matches_reference_serializer(doc):
    assert canonicalize(doc) == reference_canonicalize(doc)


@given(documents)
def test_idempotent(doc):
    once = canonicalize(doc)
    assert canonicalize(parse(once)) == once
    assert is_canonical(once)


def test_no_whitespace_and_utf8():
    out = canonicalize({"k": ["a", 1, True, None, 1.5]})
    assert out == '{"k":["a",1,true,null,1.5]}'.encode()
    assert canonicalize("é") == '"é"'.encode("utf-8")


@pytest.mark.parametrize("bad", [{1: "x"}, {"x": object()}, float("nan"), float("inf"), b"bytes", {"s": {1, 2}}])
def test_unserializable_values_raise(bad):
    with pytest.raises(CanonicalizationError):
        canonicalize(bad)


def test_parse_rejects_duplicates_and_non_canonical():
    with pytest.raises(CanonicalizationError):
        parse(b'{"a":1,"a":2}')
    with pytest.raises(CanonicalizationError):
        parse(b"NaN")
    with pytest.raises(CanonicalizationError):
        parse_strict(b'{"b":1, "a":2}')
    assert not is_canonical(b'{ }')

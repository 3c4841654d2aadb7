"""Canonical document encoding.

Every policy, token, bundle and scenario file is a tree of maps, lists and
scalars encoded as UTF-8 JSON with sorted keys and no insignificant
whitespace. Signatures are always computed over these bytes, so the
encoding must be bit-exact.
"""

from __future__ import annotations

import json
import math
from typing import Any


class CanonicalizationError(ValueError):
    """Raised when a value cannot be represented in canonical form."""


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CanonicalizationError(f"non-finite number at {path}")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"non-string key {key!r} at {path}")
            _check(item, f"{path}/{key}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    raise CanonicalizationError(f"unsupported type {type(value).__name__} at {path}")


def canonicalize(doc: Any) -> bytes:
    """Encode ``doc`` into its canonical byte form.

    Keys are emitted in code-point order, floats use the shortest repr that
    round-trips, and only the characters JSON requires are escaped.
    """
    _check(doc, "")
    text = json.dumps(
        doc,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise CanonicalizationError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name: str) -> Any:
    raise CanonicalizationError(f"non-finite literal {name}")


def parse(data: bytes | str) -> Any:
    """Parse canonical (or merely valid) JSON text into a document tree."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CanonicalizationError(f"invalid utf-8: {exc}") from exc
    try:
        return json.loads(
            data,
            object_pairs_hook=_no_duplicates,
            parse_constant=_reject_constant,
        )
    except json.JSONDecodeError as exc:
        raise CanonicalizationError(f"malformed document: {exc}") from exc


def parse_strict(data: bytes) -> Any:
    """Parse ``data`` and insist that it is already in canonical form."""
    doc = parse(data)
    if canonicalize(doc) != data:
        raise CanonicalizationError("document is not in canonical form")
    return doc


def is_canonical(data: bytes) -> bool:
    try:
        parse_strict(data)
    except CanonicalizationError:
        return False
    return True

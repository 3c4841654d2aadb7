"""Intercepted messages: headers, a body tree addressed by path, and annotations."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from soasec.core.canonical import CanonicalizationError, canonicalize, parse


class Direction(str, Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"


class PathError(KeyError):
    pass


_MISSING = object()
_ABSENT = object()


def split_path(path: str) -> list[str]:
    """``/body/order/id`` -> ``["order", "id"]``."""
    if not isinstance(path, str) or not path.startswith("/body"):
        raise PathError(f"element paths start with /body: {path!r}")
    rest = path[len("/body") :]
    if rest and not rest.startswith("/"):
        raise PathError(f"bad path {path!r}")
    parts = [p for p in rest.split("/")[1:]]
    if any(p == "" for p in parts):
        raise PathError(f"empty segment in {path!r}")
    return parts


@dataclass
class Message:
    """A mutable working copy flows through a chain; callers get copies back.

    ``annotations`` are local to the gateway that set them and never travel
    on the wire (see :meth:`wire`).
    """

    direction: Direction
    headers: dict[str, str]
    body: dict[str, Any]
    annotations: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.direction = Direction(self.direction)
        if not isinstance(self.body, dict):
            raise ValueError("message body must be an element tree (object)")
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in self.headers.items()):
            raise ValueError("headers map strings to strings")

    @property
    def correlation_id(self) -> str:
        return self.headers.get("correlation-id", "")

    def copy(self) -> "Message":
        return Message(self.direction, dict(self.headers), copy.deepcopy(self.body), copy.deepcopy(self.annotations))

    # -- body paths ----------------------------------------------------------

    def get(self, path: str, default: Any = _MISSING) -> Any:
        node: Any = self.body
        for part in split_path(path):
            if not isinstance(node, dict) or part not in node:
                if default is _MISSING:
                    raise PathError(path)
                return default
            node = node[part]
        return node

    def has(self, path: str) -> bool:
        return self.get(path, _ABSENT) is not _ABSENT

    def set(self, path: str, value: Any) -> None:
        parts = split_path(path)
        if not parts:
            if not isinstance(value, dict):
                raise PathError("the body root must stay an object")
            self.body = value
            return
        node = self.body
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise PathError(f"{path!r} crosses a scalar")
            node = nxt
        node[parts[-1]] = value

    def delete(self, path: str) -> None:
        parts = split_path(path)
        if not parts:
            raise PathError("cannot delete the body root")
        parent = self.get("/body/" + "/".join(parts[:-1])) if len(parts) > 1 else self.body
        if not isinstance(parent, dict) or parts[-1] not in parent:
            raise PathError(path)
        del parent[parts[-1]]

    # -- lookup for predicates and conditions --------------------------------

    def lookup(self, ref: str) -> list[Any]:
        """Resolve ``header.X``, ``annotation.X``, ``direction`` or a body path."""
        if ref == "direction":
            return [self.direction.value]
        if ref.startswith("header."):
            v = self.headers.get(ref[len("header.") :])
            return [] if v is None else [v]
        if ref.startswith("annotation."):
            v = self.annotations.get(ref[len("annotation.") :], _MISSING)
            return [] if v is _MISSING else [v]
        if ref.startswith("/body"):
            try:
                v = self.get(ref, _ABSENT)
            except PathError:
                return []
            if v is _ABSENT:
                return []
            return list(v) if isinstance(v, list) else [v]
        return []

    # -- serialization -----------------------------------------------------------

    def wire(self) -> dict[str, Any]:
        return {"body": copy.deepcopy(self.body), "direction": self.direction.value, "headers": dict(self.headers)}

    def to_doc(self) -> dict[str, Any]:
        doc = self.wire()
        doc["annotations"] = copy.deepcopy(self.annotations)
        return doc

    def to_bytes(self) -> bytes:
        return canonicalize(self.to_doc())

    @classmethod
    def from_doc(cls, doc: Any) -> "Message":
        if not isinstance(doc, dict) or not {"body", "direction", "headers"} <= set(doc):
            raise CanonicalizationError("not a message document")
        return cls(doc["direction"], dict(doc["headers"]), copy.deepcopy(doc["body"]), copy.deepcopy(doc.get("annotations", {})))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        return cls.from_doc(parse(data))

    def forwarded(self, direction: Direction | str | None = None) -> "Message":
        """The message as the next hop receives it: no annotations."""
        return Message(direction or self.direction, dict(self.headers), copy.deepcopy(self.body))

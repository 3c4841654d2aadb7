"""Shared value types: attributes, endpoint references, principals, signed documents."""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any
from urllib.parse import urlsplit

from soasec.core.canonical import CanonicalizationError, canonicalize, parse, parse_strict
from soasec.core.crypto import KeyRegistry, b64d, b64e, sign, verify


class Category(str, Enum):
    SUBJECT = "subject"
    RESOURCE = "resource"
    ACTION = "action"
    ENVIRONMENT = "environment"
    DELEGATE = "delegate"


class ValueType(str, Enum):
    STRING = "string"
    INTEGER = "integer"
    BOOLEAN = "boolean"
    TIMESTAMP = "timestamp"


def infer_value_type(value: Any) -> ValueType:
    if isinstance(value, bool):
        return ValueType.BOOLEAN
    if isinstance(value, int):
        return ValueType.INTEGER
    if isinstance(value, str):
        return ValueType.STRING
    raise ValueError(f"unsupported attribute value {value!r}")


def _value_matches(value_type: ValueType, value: Any) -> bool:
    if value_type is ValueType.BOOLEAN:
        return isinstance(value, bool)
    if value_type in (ValueType.INTEGER, ValueType.TIMESTAMP):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, str)


_WS = re.compile(r"\s")


@dataclass(frozen=True)
class Attribute:
    """A single ABAC attribute value, e.g. ``subject.role = "engineer"``."""

    category: Category
    id: str
    value: Any
    value_type: ValueType = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", Category(self.category))
        if not self.id or _WS.search(self.id):
            raise ValueError(f"invalid attribute id {self.id!r}")
        if self.value_type is None:
            object.__setattr__(self, "value_type", infer_value_type(self.value))
        else:
            object.__setattr__(self, "value_type", ValueType(self.value_type))
        if not _value_matches(self.value_type, self.value):
            raise ValueError(f"value {self.value!r} does not match {self.value_type.value}")

    def to_doc(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "id": self.id,
            "type": self.value_type.value,
            "value": self.value,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Attribute":
        return cls(doc["category"], doc["id"], doc["value"], doc.get("type"))


def attr(attr_id: str, value: Any) -> Attribute:
    """Shorthand: category taken from the id's first dotted segment."""
    return Attribute(Category(attr_id.split(".", 1)[0]), attr_id, value)


@dataclass(frozen=True)
class EndpointReference:
    uri: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        parts = urlsplit(self.uri) if self.uri else None
        if not parts or not parts.scheme or not (parts.netloc or parts.path):
            raise ValueError(f"invalid endpoint uri {self.uri!r}")

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"uri": self.uri}
        if self.metadata:
            doc["metadata"] = dict(self.metadata)
        return doc

    @classmethod
    def from_doc(cls, doc: dict[str, Any] | str) -> "EndpointReference":
        if isinstance(doc, str):
            return cls(doc)
        return cls(doc["uri"], dict(doc.get("metadata", {})))


@dataclass(frozen=True)
class Principal:
    id: str
    verification_key: bytes

    def __post_init__(self) -> None:
        if not self.id or not self.verification_key:
            raise ValueError("principal needs an id and a verification key")


class SignatureError(Exception):
    """A signed document failed verification."""


@dataclass(frozen=True)
class SignedDocument:
    """Canonical body bytes plus the signer's id and detached signature.

    The on-wire envelope is ``{"body": <doc>, "signature": <b64>, "signer": id}``
    and the signature always covers ``canonicalize(body)``.
    """

    body: bytes
    signer_id: str
    signature: bytes

    @classmethod
    def create(cls, body_doc: Any, signer_id: str, signing_key: bytes) -> "SignedDocument":
        body = canonicalize(body_doc)
        return cls(body, signer_id, sign(body, signing_key))

    @property
    def document(self) -> Any:
        return parse(self.body)

    def verify_with(self, verification_key: bytes) -> bool:
        return verify(self.body, self.signature, verification_key)

    def verify_in(self, registry: KeyRegistry) -> bool:
        key = registry.key_of(self.signer_id)
        return key is not None and self.verify_with(key)

    def to_doc(self) -> dict[str, Any]:
        return {
            "body": parse(self.body),
            "signature": b64e(self.signature),
            "signer": self.signer_id,
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "SignedDocument":
        if not isinstance(doc, dict) or set(doc) != {"body", "signature", "signer"}:
            raise CanonicalizationError("not a signed-document envelope")
        if not isinstance(doc["signer"], str) or not isinstance(doc["signature"], str):
            raise CanonicalizationError("bad envelope fields")
        try:
            signature = b64d(doc["signature"])
        except ValueError as exc:
            raise CanonicalizationError(str(exc)) from exc
        return cls(canonicalize(doc["body"]), doc["signer"], signature)

    def to_bytes(self) -> bytes:
        return canonicalize(self.to_doc())

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedDocument":
        """Strict wire parse: anything but the exact canonical encoding is rejected."""
        return cls.from_doc(parse_strict(data))

    def armor(self) -> str:
        return base64.b64encode(self.to_bytes()).decode("ascii")

    @classmethod
    def unarmor(cls, text: str) -> "SignedDocument":
        try:
            raw = b64d(text)
        except ValueError as exc:
            raise CanonicalizationError(str(exc)) from exc
        return cls.from_bytes(raw)

from soasec.core.audit import AuditEvent, Clock, EventLog, EventType, FrozenClock, SystemClock
from soasec.core.canonical import CanonicalizationError, canonicalize, is_canonical, parse, parse_strict
from soasec.core.crypto import (
    KeyFormatError,
    KeyPair,
    KeyRegistry,
    derive_keypair,
    generate_keypair,
    sign,
    verify,
)
from soasec.core.model import (
    Attribute,
    Category,
    EndpointReference,
    Principal,
    SignatureError,
    SignedDocument,
    ValueType,
    attr,
)

__all__ = [
    "Attribute",
    "AuditEvent",
    "CanonicalizationError",
    "Category",
    "Clock",
    "EndpointReference",
    "EventLog",
    "EventType",
    "FrozenClock",
    "KeyFormatError",
    "KeyPair",
    "KeyRegistry",
    "Principal",
    "SignatureError",
    "SignedDocument",
    "SystemClock",
    "ValueType",
    "attr",
    "canonicalize",
    "derive_keypair",
    "generate_keypair",
    "is_canonical",
    "parse",
    "parse_strict",
    "sign",
    "verify",
]

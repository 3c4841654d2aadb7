"""Ed25519 signing, key files and the principal key registry."""

from __future__ import annotations

import base64
import binascii
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from soasec.core.canonical import canonicalize, parse

SEED_SIZE = 32
PUBLIC_SIZE = 32
SIGNATURE_SIZE = 64


class KeyFormatError(ValueError):
    """A key is malformed (wrong length, bad encoding)."""


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    """Strict base64 decode: the text must be the unique encoding of its bytes."""
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, AttributeError) as exc:
        raise ValueError(f"bad base64: {exc}") from exc
    if b64e(raw) != text:
        raise ValueError("non-canonical base64")
    return raw


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public={b64e(self.public)[:12]}...)"


def _private(seed: bytes) -> Ed25519PrivateKey:
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise KeyFormatError("signing key must be a 32-byte Ed25519 seed")
    return Ed25519PrivateKey.from_private_bytes(bytes(seed))


def public_key_of(seed: bytes) -> bytes:
    return _private(seed).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    seed = os.urandom(SEED_SIZE) if seed is None else seed
    return KeyPair(private=bytes(seed), public=public_key_of(seed))


def derive_keypair(master: bytes | str, label: str) -> KeyPair:
    """Deterministically derive a keypair from ``master`` and ``label``."""
    if isinstance(master, str):
        master = master.encode("utf-8")
    seed = hashlib.sha256(master + b"\x00" + label.encode("utf-8")).digest()
    return generate_keypair(seed)


def sign(data: bytes, signing_key: bytes) -> bytes:
    # Ed25519 is deterministic: same key and message give the same signature.
    return _private(signing_key).sign(bytes(data))


def verify(data: bytes, signature: bytes, verification_key: bytes) -> bool:
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_SIZE:
        return False
    if not isinstance(verification_key, (bytes, bytearray)) or len(verification_key) != PUBLIC_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(verification_key)).verify(
            bytes(signature), bytes(data)
        )
    except (InvalidSignature, ValueError):
        return False
    return True


# -- key files ---------------------------------------------------------------


def write_key_file(path: str | Path, pair: KeyPair) -> None:
    """One keypair per file, base64 seed text."""
    Path(path).write_text(b64e(pair.private) + "\n", encoding="ascii")


def read_key_file(path: str | Path) -> KeyPair:
    text = Path(path).read_text(encoding="ascii").strip()
    try:
        seed = b64d(text)
    except ValueError as exc:
        raise KeyFormatError(f"{path}: {exc}") from exc
    return generate_keypair(seed)


class KeyRegistry:
    """Maps principal ids to Ed25519 verification keys."""

    def __init__(self, keys: dict[str, bytes] | None = None):
        self._keys: dict[str, bytes] = {}
        for pid, key in (keys or {}).items():
            self.register(pid, key)

    def register(self, principal_id: str, public_key: bytes, *, replace: bool = False) -> None:
        if not principal_id:
            raise ValueError("principal id must be non-empty")
        if not public_key or len(public_key) != PUBLIC_SIZE:
            raise KeyFormatError(f"bad verification key for {principal_id!r}")
        if principal_id in self._keys and not replace and self._keys[principal_id] != public_key:
            raise ValueError(f"principal {principal_id!r} already registered")
        self._keys[principal_id] = bytes(public_key)

    def key_of(self, principal_id: str) -> bytes | None:
        return self._keys.get(principal_id)

    def __contains__(self, principal_id: object) -> bool:
        return principal_id in self._keys

    def __iter__(self):
        return iter(sorted(self._keys))

    def __len__(self) -> int:
        return len(self._keys)

    def to_doc(self) -> dict[str, str]:
        return {pid: b64e(key) for pid, key in sorted(self._keys.items())}

    @classmethod
    def from_doc(cls, doc: dict[str, str]) -> "KeyRegistry":
        try:
            return cls({pid: b64d(key) for pid, key in doc.items()})
        except ValueError as exc:
            raise KeyFormatError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(canonicalize(self.to_doc()))

    @classmethod
    def load(cls, path: str | Path) -> "KeyRegistry":
        return cls.from_doc(parse(Path(path).read_bytes()))

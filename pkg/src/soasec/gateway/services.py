"""Resolution of USP static references to in-process services."""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from soasec.core.crypto import derive_keypair
from soasec.gateway.policy import Interface, USP, UtilitySpec


class UtilityUnavailable(Exception):
    pass


# exceptions that count as a failed attempt and are retried
TRANSIENT = (ConnectionError, TimeoutError, concurrent.futures.TimeoutError)


@dataclass
class KeyStore:
    """Named symmetric keys for element encryption."""

    keys: dict[str, bytes] = field(default_factory=dict)

    def key(self, name: str) -> bytes:
        if name not in self.keys:
            raise KeyError(f"no key {name!r}")
        return self.keys[name]

    @classmethod
    def derived(cls, master: bytes, names: list[str]) -> "KeyStore":
        # 64 bytes: AES-SIV with two 256-bit halves
        return cls({n: derive_keypair(master, n + "/a").private + derive_keypair(master, n + "/b").private for n in names})


class ServiceDirectory:
    """Endpoint URI -> service object; the in-process transport."""

    def __init__(self, services: Mapping[str, Any] | None = None):
        self._services = dict(services or {})
        self._pool: concurrent.futures.ThreadPoolExecutor | None = None

    def bind(self, uri: str, service: Any) -> None:
        self._services[uri] = service

    def resolve(self, uri: str) -> Any:
        if uri not in self._services:
            raise UtilityUnavailable(f"nothing bound at {uri}")
        return self._services[uri]

    def __contains__(self, uri: object) -> bool:
        return uri in self._services

    def call(self, usp: USP, ref: str, fn: Callable[[Any], Any], expect: Interface | None = None) -> Any:
        """Invoke ``fn(service)`` for the service named by ``ref``.

        Transient failures are retried ``retries`` times; a non-zero
        ``timeout`` bounds each attempt.
        """
        spec: UtilitySpec | None = usp.refs.get(ref)
        if spec is None:
            raise UtilityUnavailable(f"unknown utility reference {ref!r}")
        if expect is not None and spec.interface is not expect:
            raise UtilityUnavailable(f"{ref!r} is a {spec.interface.value}, not a {expect.value}")
        service = self.resolve(spec.endpoint.uri)
        last: Exception | None = None
        for _ in range(spec.retries + 1):
            try:
                if spec.timeout > 0:
                    return self._executor().submit(fn, service).result(timeout=spec.timeout)
                return fn(service)
            except TRANSIENT as exc:
                last = exc
        raise UtilityUnavailable(f"{ref!r} failed after {spec.retries + 1} attempts: {last!r}")

    def _executor(self) -> concurrent.futures.ThreadPoolExecutor:
        if self._pool is None:
            self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=4, thread_name_prefix="usp")
        return self._pool

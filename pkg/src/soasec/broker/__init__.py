"""Federation-context-aware security token service."""

from soasec.broker.broker import (
    CORE_OPERATIONS,
    IdentityBroker,
    IssuanceRecord,
    challenge_bytes,
    signed_challenge,
)
from soasec.broker.model import (
    AmbiguousSelector,
    AuthenticationFailed,
    AuthScheme,
    BrokerError,
    Claim,
    ClaimValidityRule,
    Credential,
    FederationContext,
    FederationNotFound,
    FederationSelector,
    Forbidden,
    InternalIdentity,
    InvalidSpec,
    Issued,
    NoClaimsAvailable,
    PartnerDescriptor,
    ProviderConfig,
    SecurityToken,
    SourceInvalid,
    TokenKind,
    TokenRequest,
    TransformRule,
    UnknownProvider,
    UnknownSubject,
    ValidationResult,
    secret_digest,
)

__all__ = [name for name in dir() if not name.startswith("_")]

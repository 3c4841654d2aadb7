"""Attribute-based authorization with signed policies and constrained delegation."""

from soasec.pdp.combining import combine, combine_with_winners
from soasec.pdp.engine import (
    PDP,
    DelegationResult,
    FileAttributeProvider,
    administrative_request,
    admits,
    decide,
    evaluate_policy,
    match_target,
    preprocess,
    resolve_attribute,
    validate_delegation,
)
from soasec.pdp.model import (
    AuthzPolicy,
    Clause,
    CombiningAlg,
    Decision,
    DecisionRequest,
    DecisionResponse,
    DelegationConstraint,
    MatchOp,
    Obligation,
    PolicyKind,
    RequestError,
    ResourceDecision,
    Rule,
    SchemaError,
    TargetMatcher,
    TraceEntry,
)
from soasec.pdp.store import (
    BadSignature,
    ChangeRecord,
    DuplicatePolicyId,
    Forbidden,
    NotFound,
    PapError,
    PapOp,
    PolicyLoadError,
    PolicyStore,
    StoredPolicy,
    StoreSnapshot,
    UntrustedRootSigner,
    load_policy,
    pap_apply,
)

__all__ = [name for name in dir() if not name.startswith("_")]

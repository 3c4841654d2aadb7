"""Policy enforcement gateway: message interception, interceptor chains, lifecycle, aggregation."""

from soasec.gateway.aggregate import (
    Assignment,
    ClusterComposite,
    ClusterConfigError,
    InlineComposite,
    PartitionError,
    PartitionGap,
    PartitionOverlap,
    even_partition,
)
from soasec.gateway.instance import (
    GatewayInstance,
    IllegalTransition,
    LifecycleOp,
    LoadedBundle,
    Outcome,
    ProcessResult,
    Status,
    TraceEntry,
    UnmappedAction,
    WorkerUnavailable,
    assemble_chain,
    run_message,
)
from soasec.gateway.interceptors import (
    CIPHERS,
    INTERCEPTORS,
    OBLIGATIONS,
    BadInterceptorConfig,
    Interceptor,
    StepContext,
    StepFailure,
)
from soasec.gateway.message import Direction, Message, PathError
from soasec.gateway.policy import (
    CEP,
    DUALS,
    ECP,
    IRP,
    NEEDS,
    USP,
    ActionType,
    Assertion,
    AssertionKind,
    Effect,
    EffectOp,
    Interface,
    InvalidBundle,
    IRPEntry,
    PolicyBundle,
    Step,
    UtilitySpec,
    assertion_id,
    client_ecp,
    derive_cep,
)
from soasec.gateway.services import KeyStore, ServiceDirectory, UtilityUnavailable

__all__ = [name for name in dir() if not name.startswith("_")]

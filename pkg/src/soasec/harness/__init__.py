"""Simulated multi-organization federations built from gateways, brokers and decision points."""

from soasec.harness.adaptation import (
    AdaptationActionType,
    AdaptationEngine,
    AdaptationRule,
    Firing,
    ReconfigurationRequest,
    adaptation_step,
)
from soasec.harness.builders import adaptation_doc, three_org_doc, grid_doc
from soasec.harness.scenario import (
    Organization,
    Scenario,
    ScenarioError,
    ScriptStep,
    SimulatedService,
    Transcript,
    TrustMatrix,
    load_scenario,
    standard_bundle,
)

__all__ = [name for name in dir() if not name.startswith("_")]

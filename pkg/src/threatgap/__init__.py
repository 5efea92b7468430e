"""Gap-finding threat investigation: timelines, bounded investigation, grounded alerts."""

from __future__ import annotations

__version__ = "0.1.0"

from .alerting import DynamicAlert, GapFinding, assess_gaps, emit, generate_alerts
from .config import DenyList, RunConfig
from .gateway import Gateway, PromptContract, Session, load_contract
from .investigator import derive_budget, investigate
from .model import Alert, Entity, EntityKind, EventRow, Incident, Phase, Severity
from .pipeline import IncidentRun, run_incident
from .store import QuerySpec, TableSchema, TelemetryStore
from .timeline import ActivityTimeline, aggregate_table, build_timeline

__all__ = [
    "ActivityTimeline",
    "Alert",
    "DenyList",
    "DynamicAlert",
    "Entity",
    "EntityKind",
    "EventRow",
    "GapFinding",
    "Gateway",
    "Incident",
    "IncidentRun",
    "Phase",
    "PromptContract",
    "QuerySpec",
    "RunConfig",
    "Session",
    "Severity",
    "TableSchema",
    "TelemetryStore",
    "aggregate_table",
    "assess_gaps",
    "build_timeline",
    "derive_budget",
    "emit",
    "generate_alerts",
    "investigate",
    "load_contract",
    "run_incident",
]

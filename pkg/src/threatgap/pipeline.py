"""End-to-end run for one incident: timeline, investigation, gap assessment, alerts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from .alerting import DynamicAlert, GapFinding, assess_gaps, generate_alerts
from .config import DenyList, RunConfig
from .errors import BackendFailure
from .gateway import ContractOutcome, Session, usage_report
from .investigator import InvestigationResult, investigate
from .model import Incident
from .store import TelemetryStore
from .summary import summarize_incident
from .timeline import ActivityTimeline, BuildTrace, Feeds, build_timeline

log = logging.getLogger(__name__)


@dataclass
class IncidentRun:
    """Everything one incident job produced, including partial state on failure."""

    incident_id: str
    status: str = "ok"
    error: str | None = None
    timeline: ActivityTimeline | None = None
    trace: BuildTrace = field(default_factory=BuildTrace)
    investigation: InvestigationResult | None = None
    findings: list[GapFinding] = field(default_factory=list)
    alerts: list[DynamicAlert] = field(default_factory=list)
    rejected: list[dict[str, Any]] = field(default_factory=list)
    outcomes: list[ContractOutcome] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def stats(self) -> dict[str, Any]:
        inv = self.investigation
        return {
            "incident_id": self.incident_id,
            "status": self.status,
            "error": self.error,
            "build": self.timeline.build_stats.to_dict() if self.timeline else None,
            "expansion_rounds": self.trace.rounds_executed,
            "investigation_rounds": inv.rounds_executed if inv else 0,
            "budget": inv.budget.to_dict() if inv else None,
            "tasks": len(inv.tasks) if inv else 0,
            "evidence": len(inv.evidence) if inv else 0,
            "findings": len(self.findings),
            "alerts": len(self.alerts),
            "rejected": len(self.rejected),
            "usage": usage_report(self.outcomes),
        }

    def transcript(self) -> dict[str, Any]:
        inv = self.investigation
        return {
            "incident_id": self.incident_id,
            "status": self.status,
            "error": self.error,
            "build_trace": self.trace.to_dict(),
            "investigation": inv.to_dict() if inv else None,
            "findings": [f.to_dict() for f in self.findings],
            "alerts": [a.to_dict() for a in self.alerts],
            "rejected": list(self.rejected),
            "contract_outcomes": [o.to_dict() for o in self.outcomes],
        }


def run_incident(
    incident: Incident,
    store: TelemetryStore,
    session: Session,
    feeds: Feeds | None = None,
    config: RunConfig | None = None,
    deny: DenyList | None = None,
    timeline: ActivityTimeline | None = None,
) -> IncidentRun:
    """Run the whole pipeline for one incident.

    A backend that fails every call ends the job with status ``failed``; the
    returned object still carries whatever was produced before the failure.
    Pass ``timeline`` to reuse one that was already built.
    """
    config = config or RunConfig()
    run = IncidentRun(incident.incident_id)
    try:
        if timeline is None:
            timeline = build_timeline(incident, store, session, feeds, config, deny, run.trace)
        run.timeline = timeline
        run.investigation = investigate(incident, timeline, session, config, deny)
        summary = summarize_incident(incident)
        evidence = run.investigation.evidence
        run.findings = assess_gaps(summary, evidence, timeline, session, run.investigation.tasks, run.rejected)
        run.alerts = generate_alerts(run.findings, summary, session, timeline, evidence, incident, run.rejected)
    except BackendFailure as exc:
        log.error("%s: job failed: %s", incident.incident_id, exc)
        run.status = "failed"
        run.error = str(exc)
    run.outcomes = session.outcomes
    return run

"""Held-out gap recovery: hiding one phase's alerts, scoring, and the row-only baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from ..alerting import AlertFilter, DynamicAlert, alert_id_for
from ..errors import PhaseNotPresent, RecordError, WouldEmptyIncident
from ..gateway import Gateway, Session
from ..model import Entity, Incident, Phase, Severity, is_known_technique, phase_of_technique
from ..summary import summarize_incident
from ..timeline import ActivityTimeline
from .scenarios import Scenario, Stage

log = logging.getLogger(__name__)

BASELINE_REMEDIATION = ("Review the flagged activity and contain the implicated entities",)


@dataclass(frozen=True)
class HoldOutSpec:
    scenario_id: str
    removed_phase: Phase
    removed_alert_ids: tuple[str, ...]
    visible_alert_count: int

    def __post_init__(self) -> None:
        if self.visible_alert_count < 1:
            raise ValueError("a held-out incident keeps at least one alert")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "removed_phase": self.removed_phase.value,
            "removed_alert_ids": list(self.removed_alert_ids),
            "visible_alert_count": self.visible_alert_count,
        }


def hold_out(scenario: Scenario | Incident, phase: Phase | str, scenario_id: str | None = None) -> tuple[Incident, HoldOutSpec]:
    """Remove every incident alert of ``phase``; telemetry is left untouched."""
    phase = Phase(phase)
    incident = scenario.incident if isinstance(scenario, Scenario) else scenario
    sid = scenario_id or (scenario.scenario_id if isinstance(scenario, Scenario) else incident.incident_id)
    removed = [a for a in incident.alerts if a.phase is phase]
    kept = [a for a in incident.alerts if a.phase is not phase]
    if not removed:
        raise PhaseNotPresent(f"{sid}: no {phase.value} alerts to hold out")
    if not kept:
        raise WouldEmptyIncident(f"{sid}: holding out {phase.value} leaves no alerts")
    spec = HoldOutSpec(sid, phase, tuple(a.alert_id for a in removed), len(kept))
    return replace(incident, alerts=tuple(kept)), spec


def held_out_stages(spec: HoldOutSpec, ground_truth: Iterable[Stage]) -> list[Stage]:
    return [s for s in ground_truth if s.phase is spec.removed_phase]


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class RunCounts:
    tp: int
    fp: int
    fn: int
    matched_stages: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "matched_stages": list(self.matched_stages)}


def alert_matches_stage(alert: DynamicAlert, stage: Stage, phase: Phase) -> bool:
    """The rubric for one (alert, stage) pair."""
    if alert.phase is not phase:
        return False
    overlap = bool(set(alert.mitre_techniques) & set(stage.techniques)) or bool(
        alert.implicated_entities & stage.entities
    )
    return overlap and bool(set(alert.evidence_row_ids) & set(stage.evidence_row_ids))


def score_recovery(
    emitted: Sequence[DynamicAlert], spec: HoldOutSpec, ground_truth: Iterable[Stage]
) -> RunCounts:
    """Per-stage scoring of one run.

    A held-out stage is a TP when at least one emitted alert matches it and a
    FN otherwise.  An alert matching no held-out stage is a FP.  Extra alerts
    that match an already-recovered stage count as neither.
    """
    stages = held_out_stages(spec, ground_truth)
    matched: set[str] = set()
    fp = 0
    for alert in emitted:
        hits = [s.stage_id for s in stages if alert_matches_stage(alert, s, spec.removed_phase)]
        if hits:
            matched.update(hits)
        else:
            fp += 1
    tp = len(matched)
    return RunCounts(tp, fp, len(stages) - tp, tuple(sorted(matched)))


# ---------------------------------------------------------------------------
# row-only baseline


def _classification_payload(summary_payload: Mapping[str, Any], techniques: list[str], row) -> dict[str, Any]:
    return {"incident_summary": summary_payload, "incident_techniques": techniques, "row": row.payload()}


def run_baseline(
    timeline: ActivityTimeline,
    incident: Incident,
    session: Session | Gateway,
    rejected: list[dict[str, Any]] | None = None,
) -> list[DynamicAlert]:
    """Classify each telemetry row on its own; malicious-and-novel rows become alerts.

    Candidate alerts pass through the same dedup and grounding gate as the
    full pipeline.
    """
    if isinstance(session, Gateway):
        session = session.session()
    summary = summarize_incident(incident)
    context = summary.payload()
    techniques = sorted(incident.techniques)
    rows = list(timeline.telemetry_rows)
    outcomes = session.map(
        lambda r: session.run("row_classification", _classification_payload(context, techniques, r)), rows
    )
    gate = AlertFilter(incident, timeline)
    for row, o in zip(rows, outcomes):
        if not o.ok:
            gate.rejected.append({"stage": "baseline", "reason": o.status.value, "row_id": row.row_id})
            continue
        out = o.output
        if not (out["malicious"] and out["novel"]):
            continue
        techs = tuple(t for t in out["techniques"] if is_known_technique(t))
        if not techs:
            gate.rejected.append({"stage": "baseline", "reason": "no known technique", "row_id": row.row_id})
            continue
        entities: frozenset[Entity] = row.entities
        try:
            alert = DynamicAlert(
                alert_id=alert_id_for(incident.incident_id, techs, entities, [row.row_id]),
                incident_id=incident.incident_id,
                title=f"Suspicious {row.table} activity",
                description=out["rationale"],
                severity=Severity.MEDIUM,
                mitre_techniques=techs,
                remediation=BASELINE_REMEDIATION,
                implicated_entities=entities,
                evidence_row_ids=(row.row_id,),
                phase=phase_of_technique(techs[0]),
            )
        except RecordError as exc:
            gate.rejected.append({"stage": "baseline", "reason": str(exc), "row_id": row.row_id})
            continue
        gate.offer(alert)
    if rejected is not None:
        rejected.extend(gate.rejected)
    return gate.emitted

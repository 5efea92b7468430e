"""Gap assessment, dynamic alert generation and the alert sink."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import RecordError, SinkUnavailable
from .gateway import Session
from .investigator import EvidenceItem, InvestigativeTask, Stance
from .model import (
    TECHNIQUE_RE,
    Entity,
    Incident,
    Phase,
    Severity,
    canonical_json,
    is_known_technique,
    phase_of_technique,
)
from .summary import IncidentSummary
from .timeline import ActivityTimeline

log = logging.getLogger(__name__)


class GapKind(str, Enum):
    MISSING_STAGE = "MissingStage"
    MISSING_TECHNIQUE = "MissingTechnique"
    NEW_ENTITY = "NewEntity"


def _tokens(entities: Iterable[Entity]) -> list[str]:
    return sorted(e.token for e in entities)


@dataclass(frozen=True)
class GapFinding:
    gap_kind: GapKind
    phase: Phase
    techniques: tuple[str, ...]
    implicated_entities: frozenset[Entity]
    supporting_evidence: tuple[str, ...]
    narrative: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "gap_kind": self.gap_kind.value,
            "phase": self.phase.value,
            "techniques": list(self.techniques),
            "implicated_entities": _tokens(self.implicated_entities),
            "supporting_evidence": list(self.supporting_evidence),
            "narrative": self.narrative,
        }


@dataclass(frozen=True)
class DynamicAlert:
    alert_id: str
    incident_id: str
    title: str
    description: str
    severity: Severity
    mitre_techniques: tuple[str, ...]
    remediation: tuple[str, ...]
    implicated_entities: frozenset[Entity]
    evidence_row_ids: tuple[str, ...]
    phase: Phase

    def __post_init__(self) -> None:
        object.__setattr__(self, "severity", Severity(self.severity))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "mitre_techniques", tuple(self.mitre_techniques))
        object.__setattr__(self, "remediation", tuple(self.remediation))
        object.__setattr__(self, "evidence_row_ids", tuple(self.evidence_row_ids))
        object.__setattr__(self, "implicated_entities", frozenset(self.implicated_entities))
        for name in ("mitre_techniques", "remediation", "implicated_entities", "evidence_row_ids"):
            if not getattr(self, name):
                raise RecordError(f"dynamic alert {self.alert_id}: empty {name}")
        if not self.title.strip():
            raise RecordError(f"dynamic alert {self.alert_id}: empty title")
        if phase_of_technique(self.mitre_techniques[0]) is not self.phase:
            raise RecordError(f"dynamic alert {self.alert_id}: phase disagrees with primary technique")

    def to_dict(self) -> dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "incident_id": self.incident_id,
            "title": self.title,
            "description": self.description,
            "severity": self.severity.value,
            "mitre_techniques": list(self.mitre_techniques),
            "remediation": list(self.remediation),
            "implicated_entities": [e.to_dict() for e in sorted(self.implicated_entities)],
            "evidence_row_ids": list(self.evidence_row_ids),
            "phase": self.phase.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DynamicAlert":
        try:
            return cls(
                alert_id=d["alert_id"],
                incident_id=d["incident_id"],
                title=d["title"],
                description=d["description"],
                severity=Severity(d["severity"]),
                mitre_techniques=tuple(d["mitre_techniques"]),
                remediation=tuple(d["remediation"]),
                implicated_entities=frozenset(Entity.from_dict(e) for e in d["implicated_entities"]),
                evidence_row_ids=tuple(d["evidence_row_ids"]),
                phase=Phase(d["phase"]),
            )
        except KeyError as exc:
            raise RecordError(f"dynamic alert record missing {exc}") from exc


# ---------------------------------------------------------------------------
# checks shared by generation, the baseline and the audit


def is_gap(techniques: Iterable[str], entities: Iterable[Entity], incident: Incident | IncidentSummary) -> bool:
    """True when something (a technique or an entity) is new relative to the incident."""
    return not (set(techniques) <= set(incident.techniques) and set(entities) <= set(incident.entities))


def alert_violations(
    alert: DynamicAlert, timeline: ActivityTimeline, incident: Incident | IncidentSummary
) -> list[str]:
    """Every grounding rule an emitted alert must satisfy; empty means sound."""
    out = []
    if alert.incident_id != incident.incident_id:
        out.append("incident id mismatch")
    tl_entities = timeline.entities
    for e in sorted(alert.implicated_entities):
        if e not in tl_entities:
            out.append(f"entity {e.token} not in timeline")
    for t in alert.mitre_techniques:
        if not TECHNIQUE_RE.match(t) or not is_known_technique(t):
            out.append(f"technique {t} unknown")
    for rid in alert.evidence_row_ids:
        row = timeline.row(rid)
        if row is None:
            out.append(f"evidence row {rid} not in timeline")
        elif row.is_alert_row:
            out.append(f"evidence row {rid} is an alert row")
    if not out and phase_of_technique(alert.mitre_techniques[0]) is not alert.phase:
        out.append("phase disagrees with primary technique")
    if not is_gap(alert.mitre_techniques, alert.implicated_entities, incident):
        out.append("alert adds no technique or entity beyond the incident")
    return out


def _covered_by(techs: frozenset[str], ents: frozenset[Entity], others: Iterable[tuple[frozenset, frozenset]]) -> bool:
    return any(techs <= t and ents <= e for t, e in others)


def alert_id_for(incident_id: str, techniques: Sequence[str], entities: Iterable[Entity], evidence: Sequence[str]) -> str:
    raw = canonical_json([incident_id, sorted(techniques), _tokens(entities), sorted(evidence)])
    return "dyn-" + hashlib.sha1(raw.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# assessment


def assess_gaps(
    summary: IncidentSummary,
    evidence: Sequence[EvidenceItem],
    timeline: ActivityTimeline,
    session: Session,
    tasks: Sequence[InvestigativeTask] = (),
    rejected: list[dict[str, Any]] | None = None,
) -> list[GapFinding]:
    """Ask for attack-story gaps, then drop findings that add nothing new."""
    if not evidence:
        return []
    by_task: dict[str, list[EvidenceItem]] = {}
    for item in evidence:
        by_task.setdefault(item.task_id, []).append(item)
    task_index = {t.task_id: t for t in tasks}
    groups = []
    for tid in sorted(by_task):
        t = task_index.get(tid)
        groups.append(
            {
                "task_id": tid,
                "hypothesis": t.hypothesis if t else "other",
                "entity_scope": _tokens(t.entity_scope) if t else [],
                "items": [
                    {**it.to_dict(), "row": timeline.row(it.row_id).payload()}
                    for it in by_task[tid]
                ],
            }
        )
    payload = {
        "incident_summary": summary.payload(),
        "incident_techniques": sorted(summary.techniques),
        "incident_entities": _tokens(summary.entities),
        "evidence": groups,
        "evidence_row_ids": sorted({e.row_id for e in evidence}),
        "timeline_entities": _tokens(timeline.entities),
    }
    o = session.run("gap_assessment", payload)
    if not o.ok:
        return []
    findings = []
    for f in o.output["findings"]:
        techniques = tuple(f["techniques"])
        entities = frozenset(Entity.parse(t) for t in f["implicated_entities"])
        reason = None
        if not all(is_known_technique(t) for t in techniques):
            reason = "unknown technique"
        elif phase_of_technique(techniques[0]) is not Phase(f["phase"]):
            reason = "phase disagrees with primary technique"
        elif not is_gap(techniques, entities, summary):
            reason = "already covered by incident alerts"
        if reason:
            if rejected is not None:
                rejected.append({"stage": "assessment", "reason": reason, "finding": f})
            continue
        findings.append(
            GapFinding(
                GapKind(f["gap_kind"]),
                Phase(f["phase"]),
                techniques,
                entities,
                tuple(f["supporting_evidence"]),
                f["narrative"],
            )
        )
    return findings


# ---------------------------------------------------------------------------
# generation


def clamp_severity(severity: Severity, cited: Sequence[str], evidence: Sequence[EvidenceItem]) -> Severity:
    """Cap at Medium when every stance attached to the cited rows is Contextualizes."""
    stances = {e.stance for e in evidence if e.row_id in set(cited)}
    if stances and stances <= {Stance.CONTEXTUALIZES} and severity.rank > Severity.MEDIUM.rank:
        return Severity.MEDIUM
    return severity


@dataclass
class AlertFilter:
    """Sequential dedup and soundness gate applied to every candidate alert."""

    incident: Incident | IncidentSummary
    timeline: ActivityTimeline
    emitted: list[DynamicAlert] = field(default_factory=list)
    rejected: list[dict[str, Any]] = field(default_factory=list)

    def offer(self, alert: DynamicAlert) -> bool:
        techs, ents = frozenset(alert.mitre_techniques), alert.implicated_entities
        existing = [(frozenset(a.techniques), a.entities) for a in getattr(self.incident, "alerts", ())]
        if not existing and isinstance(self.incident, IncidentSummary):
            existing = [(frozenset(g.techniques), g.entities) for g in self.incident.detector_groups]
        prior = [(frozenset(a.mitre_techniques), a.implicated_entities) for a in self.emitted]
        if _covered_by(techs, ents, existing):
            self.rejected.append({"stage": "dedup", "reason": "duplicates an incident alert", "alert_id": alert.alert_id})
            return False
        if _covered_by(techs, ents, prior):
            self.rejected.append({"stage": "dedup", "reason": "duplicates an earlier dynamic alert", "alert_id": alert.alert_id})
            return False
        problems = alert_violations(alert, self.timeline, self.incident)
        if problems:
            self.rejected.append({"stage": "validation", "reason": "; ".join(problems), "alert_id": alert.alert_id})
            return False
        self.emitted.append(alert)
        return True


def generate_alerts(
    findings: Sequence[GapFinding],
    summary: IncidentSummary,
    session: Session,
    timeline: ActivityTimeline,
    evidence: Sequence[EvidenceItem] = (),
    incident: Incident | None = None,
    rejected: list[dict[str, Any]] | None = None,
) -> list[DynamicAlert]:
    """At most one alert per finding; duplicates and ungrounded alerts are suppressed."""

    def ask(f: GapFinding):
        payload = {
            "incident_id": summary.incident_id,
            "incident_summary": summary.payload(),
            "finding": f.to_dict(),
            "evidence": [timeline.row(r).payload() for r in f.supporting_evidence],
            "allowed_entities": _tokens(f.implicated_entities),
            "allowed_evidence": list(f.supporting_evidence),
            "allowed_techniques": list(f.techniques),
        }
        return session.run("alert_generation", payload)

    outcomes = session.map(ask, list(findings))
    gate = AlertFilter(incident if incident is not None else summary, timeline)
    for o in outcomes:
        if not o.ok:
            gate.rejected.append({"stage": "generation", "reason": o.status.value})
            continue
        out = o.output
        entities = frozenset(Entity.parse(t) for t in out["implicated_entities"])
        techniques = tuple(out["mitre_techniques"])
        cited = tuple(out["evidence_row_ids"])
        try:
            alert = DynamicAlert(
                alert_id=alert_id_for(summary.incident_id, techniques, entities, cited),
                incident_id=summary.incident_id,
                title=out["title"],
                description=out["description"],
                severity=clamp_severity(Severity(out["severity"]), cited, evidence),
                mitre_techniques=techniques,
                remediation=tuple(out["remediation"]),
                implicated_entities=entities,
                evidence_row_ids=cited,
                phase=phase_of_technique(techniques[0]),
            )
        except (RecordError, KeyError, ValueError) as exc:
            gate.rejected.append({"stage": "generation", "reason": str(exc)})
            continue
        gate.offer(alert)
    if rejected is not None:
        rejected.extend(gate.rejected)
    return gate.emitted


# ---------------------------------------------------------------------------
# emission


@dataclass(frozen=True)
class EmissionReceipt:
    sink: str
    alert_ids: tuple[str, ...]
    offsets: tuple[int, ...]
    skipped: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "sink": self.sink,
            "alert_ids": list(self.alert_ids),
            "offsets": list(self.offsets),
            "skipped": list(self.skipped),
        }


_SINK_LOCKS: dict[str, threading.Lock] = {}
_SINK_LOCKS_GUARD = threading.Lock()


def _sink_lock(key: str) -> threading.Lock:
    with _SINK_LOCKS_GUARD:
        return _SINK_LOCKS.setdefault(key, threading.Lock())


def _existing_ids(path: Path) -> set[str]:
    ids = set()
    if not path.exists():
        return ids
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    ids.add(json.loads(line)["alert_id"])
                except (json.JSONDecodeError, KeyError, TypeError):
                    continue
    return ids


def emit(alerts: Sequence[DynamicAlert], sink: str | Path = "-") -> EmissionReceipt:
    """Append alerts as JSON lines; ids already present in the sink are skipped.

    ``sink="-"`` writes to standard output, where offsets count bytes written by
    this call.
    """
    if str(sink) == "-":
        ids, offsets, pos = [], [], 0
        for a in alerts:
            line = canonical_json(a.to_dict()) + "\n"
            sys.stdout.write(line)
            ids.append(a.alert_id)
            offsets.append(pos)
            pos += len(line.encode("utf-8"))
        sys.stdout.flush()
        return EmissionReceipt("-", tuple(ids), tuple(offsets), ())
    path = Path(sink)
    with _sink_lock(str(path.resolve())):
        try:
            present = _existing_ids(path)
            ids, offsets, skipped = [], [], []
            with open(path, "ab") as fh:
                for a in alerts:
                    if a.alert_id in present:
                        skipped.append(a.alert_id)
                        continue
                    offsets.append(fh.tell())
                    fh.write((canonical_json(a.to_dict()) + "\n").encode("utf-8"))
                    ids.append(a.alert_id)
                    present.add(a.alert_id)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise SinkUnavailable(f"cannot append to {path}: {exc}") from exc
    return EmissionReceipt(str(path), tuple(ids), tuple(offsets), tuple(skipped))


def load_alerts(path: str | Path) -> list[DynamicAlert]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(DynamicAlert.from_dict(json.loads(line)))
    return out

"""Incident summary: repeated alerts from one detector collapse into a single group."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Any

from .model import Entity, Incident, Phase, format_time

PHASE_ORDER = (Phase.INITIAL_ACCESS, Phase.EXECUTION, Phase.POST_COMPROMISE)


@dataclass(frozen=True)
class DetectorGroup:
    detector_id: str
    alert_count: int
    representative_title: str
    entities: frozenset[Entity]
    techniques: tuple[str, ...]
    first_seen: datetime
    last_seen: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "detector_id": self.detector_id,
            "alert_count": self.alert_count,
            "representative_title": self.representative_title,
            "entities": sorted(e.token for e in self.entities),
            "techniques": list(self.techniques),
            "first_seen": format_time(self.first_seen),
            "last_seen": format_time(self.last_seen),
        }


@dataclass(frozen=True)
class IncidentSummary:
    incident_id: str
    threat_type: str
    priority_score: float
    detector_groups: tuple[DetectorGroup, ...]
    phase_coverage: frozenset[Phase]
    entities: frozenset[Entity]
    techniques: frozenset[str]

    def payload(self) -> dict[str, Any]:
        """The form every contract receives as incident context."""
        return {
            "incident_id": self.incident_id,
            "threat_type": self.threat_type,
            "priority_score": self.priority_score,
            "techniques": sorted(self.techniques),
            "entities": sorted(e.token for e in self.entities),
            "phase_coverage": [p.value for p in PHASE_ORDER if p in self.phase_coverage],
            "detector_groups": [g.to_dict() for g in self.detector_groups],
        }

    def to_dict(self) -> dict[str, Any]:
        return self.payload()


def summarize_incident(incident: Incident) -> IncidentSummary:
    """Group alerts by detector; the earliest alert names the group."""
    by_detector: dict[str, list] = {}
    for a in incident.alerts:
        by_detector.setdefault(a.detector_id, []).append(a)
    groups = []
    for det in sorted(by_detector):
        alerts = sorted(by_detector[det], key=lambda a: (a.timestamp, a.alert_id))
        ents: set[Entity] = set()
        techs: list[str] = []
        for a in alerts:
            ents |= a.entities
            techs.extend(t for t in a.techniques if t not in techs)
        groups.append(
            DetectorGroup(
                detector_id=det,
                alert_count=len(alerts),
                representative_title=alerts[0].title,
                entities=frozenset(ents),
                techniques=tuple(techs),
                first_seen=alerts[0].timestamp,
                last_seen=max(a.timestamp for a in alerts),
            )
        )
    return IncidentSummary(
        incident_id=incident.incident_id,
        threat_type=incident.threat_type,
        priority_score=incident.priority_score,
        detector_groups=tuple(groups),
        phase_coverage=incident.phases,
        entities=incident.entities,
        techniques=incident.techniques,
    )

"""Bounded planner-executor investigation over a fixed activity timeline."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

from .config import DenyList, RunConfig, default_deny_list
from .errors import BackendFailure, OutOfRange
from .gateway import OutcomeStatus, Session
from .model import Entity, Incident, format_time
from .summary import DetectorGroup, IncidentSummary, summarize_incident
from .timeline import ActivityTimeline

__all__ = [
    "DetectorGroup",
    "EvidenceItem",
    "HYPOTHESES",
    "IncidentSummary",
    "InvestigationResult",
    "InvestigativeTask",
    "Stance",
    "TaskBudget",
    "TaskKind",
    "derive_budget",
    "execute",
    "investigate",
    "plan",
    "summarize_incident",
]

log = logging.getLogger(__name__)

HYPOTHESES = ("compromise", "execution", "persistence", "lateral-movement", "benign-admin", "other")
ROUNDS = 2


class TaskKind(str, Enum):
    DEPTH = "Depth"
    LATERAL = "Lateral"


class Stance(str, Enum):
    SUPPORTS = "Supports"
    REFUTES = "Refutes"
    CONTEXTUALIZES = "Contextualizes"


@dataclass(frozen=True)
class TaskBudget:
    max_tasks_total: int
    max_tasks_per_round: int

    def to_dict(self) -> dict[str, int]:
        return {"max_tasks_total": self.max_tasks_total, "max_tasks_per_round": self.max_tasks_per_round}


def derive_budget(priority_score: float, override_total: int | None = None) -> TaskBudget:
    """Step function from priority to task budget: <0.3 -> 4, [0.3, 0.7] -> 8, >0.7 -> 12.

    Half of the total is available per round.
    """
    if not isinstance(priority_score, (int, float)) or not 0.0 <= priority_score <= 1.0:
        raise OutOfRange(f"priority score {priority_score!r} outside [0, 1]")
    if override_total is not None:
        total = override_total
    elif priority_score < 0.3:
        total = 4
    elif priority_score <= 0.7:
        total = 8
    else:
        total = 12
    return TaskBudget(total, max(1, total // 2))


@dataclass(frozen=True)
class InvestigativeTask:
    task_id: str
    round: int
    kind: TaskKind
    entity_scope: frozenset[Entity]
    hypothesis: str
    evidence_sought: str

    def __post_init__(self) -> None:
        if self.round not in (1, 2):
            raise ValueError("task round must be 1 or 2")
        if self.round == 1 and self.kind is not TaskKind.DEPTH:
            raise ValueError("round-1 tasks are depth tasks")
        if not self.entity_scope:
            raise ValueError("task needs a non-empty entity scope")
        if self.hypothesis not in HYPOTHESES:
            raise ValueError(f"unknown hypothesis {self.hypothesis!r}")

    def payload(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "round": self.round,
            "kind": self.kind.value,
            "entity_scope": sorted(e.token for e in self.entity_scope),
            "hypothesis": self.hypothesis,
            "evidence_sought": self.evidence_sought,
        }

    to_dict = payload


@dataclass(frozen=True)
class EvidenceItem:
    task_id: str
    row_id: str
    stance: Stance
    explanation: str

    def to_dict(self) -> dict[str, str]:
        return {
            "task_id": self.task_id,
            "row_id": self.row_id,
            "stance": self.stance.value,
            "explanation": self.explanation,
        }


@dataclass(frozen=True)
class InvestigationResult:
    summary: IncidentSummary
    budget: TaskBudget
    tasks: tuple[InvestigativeTask, ...]
    evidence: tuple[EvidenceItem, ...]
    rounds_executed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary.to_dict(),
            "budget": self.budget.to_dict(),
            "rounds_executed": self.rounds_executed,
            "tasks": [t.to_dict() for t in self.tasks],
            "evidence": [e.to_dict() for e in self.evidence],
        }


def _overview(timeline: ActivityTimeline) -> dict[str, Any]:
    tables = Counter(r.table for r in timeline.telemetry_rows)
    times = [r.timestamp for r in timeline.rows]
    return {
        "row_count": len(timeline.rows),
        "alert_rows": len(timeline.alert_rows),
        "aggregate_rows": sum(1 for r in timeline.rows if r.is_aggregate),
        "tables": dict(sorted(tables.items())),
        "time_range": [format_time(min(times)), format_time(max(times))] if times else [],
        "enrichments": [e.to_dict() for e in timeline.enrichments],
    }


def lateral_candidates(
    timeline: ActivityTimeline, incident_entities: frozenset[Entity], deny: DenyList | None = None
) -> list[Entity]:
    """Timeline-surfaced entities outside the incident, minus low-signal ones."""
    deny = deny or default_deny_list()
    ents = {e for r in timeline.telemetry_rows for e in r.entities}
    return sorted(e for e in ents - incident_entities if not deny.is_low_signal(e))


def plan(
    summary: IncidentSummary,
    timeline: ActivityTimeline,
    prior_evidence: Sequence[EvidenceItem],
    round: int,
    budget: TaskBudget,
    session: Session,
    planned_so_far: int = 0,
    deny: DenyList | None = None,
) -> list[InvestigativeTask]:
    """One planning contract call; suppression yields no tasks for the round."""
    if round not in (1, 2):
        raise ValueError("round must be 1 or 2")
    max_tasks = min(budget.max_tasks_per_round, budget.max_tasks_total - planned_so_far)
    if max_tasks <= 0:
        return []
    lateral = lateral_candidates(timeline, summary.entities, deny) if round == 2 else []
    payload = {
        "round": round,
        "incident_summary": summary.payload(),
        "depth_entities": sorted(e.token for e in summary.entities),
        "lateral_entities": [e.token for e in lateral],
        "prior_evidence": [e.to_dict() for e in prior_evidence],
        "timeline_overview": _overview(timeline),
        "max_tasks": max_tasks,
        "hypotheses": list(HYPOTHESES),
    }
    o = session.run("investigation_plan", payload)
    if not o.ok:
        log.info("%s round %d plan suppressed (%s)", summary.incident_id, round, o.status.value)
        return []
    tasks: list[InvestigativeTask] = []
    specs = [(TaskKind.DEPTH, t) for t in o.output["depth_tasks"]]
    specs += [(TaskKind.LATERAL, t) for t in o.output["lateral_tasks"]]
    for kind, t in specs[:max_tasks]:
        tasks.append(
            InvestigativeTask(
                task_id=f"r{round}-t{len(tasks) + 1}",
                round=round,
                kind=kind,
                entity_scope=frozenset(Entity.parse(tok) for tok in t["entity_scope"]),
                hypothesis=t["hypothesis"],
                evidence_sought=t["evidence_sought"],
            )
        )
    return tasks


def execute(
    tasks: Sequence[InvestigativeTask],
    timeline: ActivityTimeline,
    session: Session,
    incident_context: Mapping[str, Any],
    batch_size: int = 25,
) -> list[EvidenceItem]:
    """Filter each task's candidate rows (alert rows excluded) through the relevance contract."""
    rows = timeline.telemetry_rows
    ctx = {
        "incident_id": incident_context["incident_id"],
        "threat_type": incident_context["threat_type"],
        "techniques": list(incident_context["techniques"]),
    }

    def run_task(task: InvestigativeTask) -> list[EvidenceItem]:
        candidates = [r for r in rows if r.entities & task.entity_scope]
        items: list[EvidenceItem] = []
        kept: set[str] = set()
        for i in range(0, len(candidates), batch_size):
            chunk = candidates[i : i + batch_size]
            payload = {"incident": ctx, "task": task.payload(), "candidate_rows": [r.payload() for r in chunk]}
            o = session.run("evidence_filter", payload)
            if not o.ok:
                continue
            for k in o.output["kept"]:
                if k["row_id"] in kept:
                    continue
                kept.add(k["row_id"])
                items.append(EvidenceItem(task.task_id, k["row_id"], Stance(k["stance"]), k["explanation"]))
        return items

    out: list[EvidenceItem] = []
    for items in session.map(run_task, list(tasks)):
        out.extend(items)
    return out


def investigate(
    incident: Incident,
    timeline: ActivityTimeline,
    session: Session,
    config: RunConfig | None = None,
    deny: DenyList | None = None,
) -> InvestigationResult:
    """Exactly two plan/execute rounds under the priority-derived budget."""
    config = config or RunConfig()
    summary = summarize_incident(incident)
    budget = derive_budget(incident.priority_score, config.max_tasks_total)
    tasks: list[InvestigativeTask] = []
    evidence: list[EvidenceItem] = []
    rounds = 0
    for rnd in range(1, ROUNDS + 1):
        new_tasks = plan(summary, timeline, evidence, rnd, budget, session, len(tasks), deny)
        tasks.extend(new_tasks)
        evidence.extend(execute(new_tasks, timeline, session, summary.payload(), config.evidence_batch))
        rounds = rnd
    outcomes = session.outcomes
    if outcomes and all(o.status is OutcomeStatus.BACKEND_FAILURE for o in outcomes):
        raise BackendFailure(f"{incident.incident_id}: every model call failed")
    return InvestigationResult(summary, budget, tuple(tasks), tuple(evidence), rounds)

"""Activity timeline construction: two bounded rounds of table selection,
pivot expansion, adaptive aggregation and entity selection, then enrichment.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .config import DenyList, RunConfig, default_deny_list
from .errors import BackendFailure, EmptySchedule, RecordError, UnknownTable
from .gateway import ContractOutcome, OutcomeStatus, Session
from .model import (
    AggregateMeta,
    Alert,
    Entity,
    EventRow,
    Incident,
    canonical_json,
    epoch_seconds,
    format_time,
    from_epoch,
    iter_jsonl,
    normalize_entity,
    parse_time,
)
from .store import ColumnStats, QuerySpec, TableSchema, TelemetryStore, column_stats
from .summary import summarize_incident

log = logging.getLogger(__name__)

ALERT_TABLE = "AlertEvidence"
SAMPLES_PER_COLUMN = 3
FALLBACK_CONCENTRATION = 0.3
FALLBACK_THRESHOLD = 10
MAX_ROUNDS = 2


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class TableDecision:
    table: str
    selected: bool
    lookback_hours: int | None
    rationale: str
    status: str = "Valid"  # Valid | AutoExcluded | SuppressedAfterRetries | BackendFailure

    def __post_init__(self) -> None:
        if self.selected != (self.lookback_hours is not None):
            raise ValueError(f"{self.table}: lookback must be present exactly when selected")
        if self.lookback_hours is not None and self.lookback_hours <= 0:
            raise ValueError(f"{self.table}: lookback must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "table": self.table,
            "selected": self.selected,
            "lookback_hours": self.lookback_hours,
            "rationale": self.rationale,
            "status": self.status,
        }


@dataclass(frozen=True)
class RetrievalPlan:
    round: int
    decisions: tuple[TableDecision, ...]

    @property
    def selected(self) -> tuple[TableDecision, ...]:
        return tuple(d for d in self.decisions if d.selected)

    def to_dict(self) -> dict[str, Any]:
        return {"round": self.round, "decisions": [d.to_dict() for d in self.decisions]}


@dataclass(frozen=True)
class EntityFrontier:
    round: int
    entities: frozenset[Entity]
    provenance: Mapping[Entity, tuple[str, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "entities": sorted(e.token for e in self.entities),
            "provenance": {e.token: list(self.provenance.get(e, ())) for e in sorted(self.entities)},
        }


@dataclass(frozen=True)
class GroupingLevel:
    group_keys: tuple[str, ...]
    support_threshold: int
    rationale: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_keys", tuple(self.group_keys))
        if not self.group_keys:
            raise ValueError("grouping level needs at least one key")
        if self.support_threshold < 2:
            raise ValueError("support_threshold must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        return {
            "group_keys": list(self.group_keys),
            "support_threshold": self.support_threshold,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class GroupingSchedule:
    levels: tuple[GroupingLevel, ...]
    row_budget: int
    max_levels: int
    source: str = "model"  # model | fallback

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.row_budget <= 0 or self.max_levels <= 0:
            raise ValueError("row_budget and max_levels must be positive")
        if len(self.levels) > self.max_levels:
            raise ValueError("schedule has more levels than max_levels")
        for a, b in zip(self.levels, self.levels[1:]):
            if len(b.group_keys) > len(a.group_keys):
                raise ValueError("later grouping levels must not add keys")

    def to_dict(self) -> dict[str, Any]:
        return {
            "levels": [lv.to_dict() for lv in self.levels],
            "row_budget": self.row_budget,
            "max_levels": self.max_levels,
            "source": self.source,
        }


class EnrichmentSource(str, Enum):
    UEBA = "UEBA"
    THREAT_INTEL = "ThreatIntel"


@dataclass(frozen=True)
class FeedRecord:
    source: EnrichmentSource
    entity: Entity
    label: str
    score: float
    window_start: datetime | None = None
    window_end: datetime | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise RecordError(f"feed score {self.score} outside [0, 1]")

    @classmethod
    def from_dict(cls, source: EnrichmentSource | str, d: Mapping[str, Any]) -> "FeedRecord":
        try:
            ws, we = d.get("window_start"), d.get("window_end")
            return cls(
                EnrichmentSource(source),
                normalize_entity(d["kind"], d["value"]),
                str(d["label"]),
                float(d["score"]),
                parse_time(ws) if ws else None,
                parse_time(we) if we else None,
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, RecordError):
                raise
            raise RecordError(f"bad feed record {d!r}: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.entity.kind.value,
            "value": self.entity.value,
            "label": self.label,
            "score": self.score,
        }
        if self.window_start is not None:
            out["window_start"] = format_time(self.window_start)
        if self.window_end is not None:
            out["window_end"] = format_time(self.window_end)
        return out


@dataclass(frozen=True)
class Feeds:
    ueba: tuple[FeedRecord, ...] = ()
    ti: tuple[FeedRecord, ...] = ()

    @classmethod
    def load(cls, ueba_path: str | Path | None = None, ti_path: str | Path | None = None) -> "Feeds":
        def read(path, source):
            if path is None:
                return ()
            return tuple(FeedRecord.from_dict(source, rec) for _, rec in iter_jsonl(path))

        return cls(read(ueba_path, EnrichmentSource.UEBA), read(ti_path, EnrichmentSource.THREAT_INTEL))


@dataclass(frozen=True)
class Enrichment:
    target: str  # entity token or row_id
    source: EnrichmentSource
    label: str
    score: float

    def to_dict(self) -> dict[str, Any]:
        return {"target": self.target, "source": self.source.value, "label": self.label, "score": self.score}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Enrichment":
        return cls(d["target"], EnrichmentSource(d["source"]), d["label"], float(d["score"]))


@dataclass(frozen=True)
class BuildStats:
    raw_row_count: int
    post_aggregation_row_count: int
    tables_selected: int
    rounds: tuple[Mapping[str, Any], ...] = ()

    @property
    def compression_ratio(self) -> float:
        if self.raw_row_count == 0:
            return 1.0
        return self.raw_row_count / max(self.post_aggregation_row_count, 1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw_row_count": self.raw_row_count,
            "post_aggregation_row_count": self.post_aggregation_row_count,
            "tables_selected": self.tables_selected,
            "compression_ratio": self.compression_ratio,
            "rounds": [dict(r) for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BuildStats":
        return cls(
            int(d["raw_row_count"]),
            int(d["post_aggregation_row_count"]),
            int(d["tables_selected"]),
            tuple(d.get("rounds", ())),
        )


@dataclass(frozen=True)
class ActivityTimeline:
    incident_id: str
    rows: tuple[EventRow, ...]
    enrichments: tuple[Enrichment, ...] = ()
    build_stats: BuildStats = BuildStats(0, 0, 0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "enrichments", tuple(self.enrichments))
        index = {}
        for r in self.rows:
            if r.row_id in index:
                raise RecordError(f"timeline {self.incident_id}: duplicate row {r.row_id}")
            index[r.row_id] = r
        object.__setattr__(self, "_index", index)
        targets = set(index) | {e.token for e in self.entities}
        for en in self.enrichments:
            if en.target not in targets:
                raise RecordError(f"timeline {self.incident_id}: enrichment target {en.target} not in timeline")

    def row(self, row_id: str) -> EventRow | None:
        return self._index.get(row_id)

    def has_row(self, row_id: str) -> bool:
        return row_id in self._index

    @property
    def entities(self) -> frozenset[Entity]:
        out: set[Entity] = set()
        for r in self.rows:
            out |= r.entities
        return frozenset(out)

    @property
    def alert_rows(self) -> tuple[EventRow, ...]:
        return tuple(r for r in self.rows if r.is_alert_row)

    @property
    def telemetry_rows(self) -> tuple[EventRow, ...]:
        return tuple(r for r in self.rows if not r.is_alert_row)

    def covered_row_ids(self) -> frozenset[str]:
        """Raw telemetry row ids represented, directly or via aggregates."""
        return frozenset(rid for r in self.telemetry_rows for rid in r.covered_row_ids())

    def to_dict(self) -> dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "rows": [r.to_dict() for r in self.rows],
            "enrichments": [e.to_dict() for e in self.enrichments],
            "build_stats": self.build_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ActivityTimeline":
        return cls(
            d["incident_id"],
            tuple(EventRow.from_dict(r) for r in d["rows"]),
            tuple(Enrichment.from_dict(e) for e in d.get("enrichments", ())),
            BuildStats.from_dict(d["build_stats"]),
        )

    def serialize(self) -> str:
        return canonical_json(self.to_dict())


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchCriteria:
    min_priority: float = 0.0


def batch_incidents(incidents: Sequence[Incident], criteria: BatchCriteria | None = None) -> list[list[Incident]]:
    """Drop incidents under the priority floor and partition the rest by threat type.

    Batches come out by descending maximum priority; ties break on threat type.
    Within a batch, incidents keep descending-priority order.
    """
    criteria = criteria or BatchCriteria()
    by_type: dict[str, list[Incident]] = {}
    for inc in incidents:
        if inc.priority_score >= criteria.min_priority:
            by_type.setdefault(inc.threat_type, []).append(inc)
    batches = [
        sorted(group, key=lambda i: (-i.priority_score, i.incident_id)) for group in by_type.values()
    ]
    batches.sort(key=lambda b: (-b[0].priority_score, b[0].threat_type))
    return batches


# ---------------------------------------------------------------------------
# alert rows


def alert_row(alert: Alert) -> EventRow:
    return EventRow(
        row_id=f"alert:{alert.alert_id}",
        table=ALERT_TABLE,
        timestamp=alert.timestamp,
        pivot_entities=alert.entities,
        related_entities=frozenset(),
        attributes={
            "alert_id": alert.alert_id,
            "detector_id": alert.detector_id,
            "title": alert.title,
            "severity": alert.severity.value,
            "techniques": list(alert.techniques),
            "phase": alert.phase.value,
        },
        is_alert_row=True,
    )


# ---------------------------------------------------------------------------
# table selection


def _table_payload(schema: TableSchema) -> dict[str, Any]:
    return {
        "name": schema.name,
        "description": schema.description,
        "columns": [c.to_dict() for c in schema.columns],
    }


def select_tables(
    context: Mapping[str, Any],
    frontier: EntityFrontier,
    schemas: Sequence[TableSchema],
    session: Session,
    max_lookback_hours: int,
) -> RetrievalPlan:
    """One table-selection contract per kind-compatible table; failures exclude the table."""
    if not schemas:
        raise ValueError("select_tables needs at least one table schema")
    kinds = {e.kind for e in frontier.entities}
    tokens = sorted(e.token for e in frontier.entities)
    asked = [s for s in schemas if s.pivot_kinds & kinds]

    def ask(schema: TableSchema) -> ContractOutcome:
        payload = {
            "incident": dict(context),
            "round": frontier.round,
            "frontier": tokens,
            "table": _table_payload(schema),
            "max_lookback_hours": max_lookback_hours,
        }
        return session.run("table_selection", payload)

    outcomes = dict(zip((s.name for s in asked), session.map(ask, asked)))
    decisions = []
    for s in schemas:
        o = outcomes.get(s.name)
        if o is None:
            decisions.append(TableDecision(s.name, False, None, "no pivotable column for frontier entity kinds", "AutoExcluded"))
        elif o.ok:
            out = o.output
            decisions.append(
                TableDecision(
                    s.name,
                    bool(out["selected"]),
                    int(out["lookback_hours"]) if out["selected"] else None,
                    out["rationale"],
                )
            )
        else:
            decisions.append(TableDecision(s.name, False, None, "excluded: contract output suppressed", o.status.value))
    if outcomes and all(o.status is OutcomeStatus.BACKEND_FAILURE for o in outcomes.values()):
        raise BackendFailure(f"table selection failed for every table in round {frontier.round}")
    return RetrievalPlan(frontier.round, tuple(decisions))


# ---------------------------------------------------------------------------
# expansion


def expand(
    frontier: EntityFrontier,
    plan: RetrievalPlan,
    store: TelemetryStore,
    now: datetime,
    seen: Iterable[str] = (),
    row_cap: int | None = None,
    errors: list[str] | None = None,
    session: Session | None = None,
) -> list[EventRow]:
    """Query every selected table for the frontier; union rows, dropping ids already seen."""
    if not frontier.entities or not plan.selected:
        return []
    seen_ids = set(seen)

    def query(decision: TableDecision):
        spec_kw = {} if row_cap is None else {"row_cap": row_cap}
        try:
            spec = QuerySpec(
                decision.table,
                frontier.entities,
                now - timedelta(hours=decision.lookback_hours),
                now,
                **spec_kw,
            )
            return store.query_events(spec)
        except (UnknownTable, ValueError) as exc:
            return exc

    results = session.map(query, plan.selected) if session is not None else [query(d) for d in plan.selected]
    out: list[EventRow] = []
    for decision, res in zip(plan.selected, results):
        if isinstance(res, Exception):
            msg = f"{decision.table}: {type(res).__name__}: {res}"
            log.warning("expansion skipped %s", msg)
            if errors is not None:
                errors.append(msg)
            continue
        if res.truncated and errors is not None:
            errors.append(f"{decision.table}: truncated at {len(res)} of {res.matched} rows")
        for row in res.rows:
            if row.row_id not in seen_ids:
                seen_ids.add(row.row_id)
                out.append(row)
    return out


# ---------------------------------------------------------------------------
# aggregation


def fallback_schedule(
    schema: TableSchema, stats: Sequence[ColumnStats], row_budget: int, max_levels: int
) -> GroupingSchedule:
    """Single level over concentrated categorical columns; no levels when none qualify."""
    by_name = {s.column: s for s in stats}
    keys = [
        c.name
        for c in schema.stat_columns
        if c.type in ("string", "bool", "int")
        and c.name in by_name
        and by_name[c.name].largest_group_fraction >= FALLBACK_CONCENTRATION
    ]
    levels = (GroupingLevel(tuple(keys), FALLBACK_THRESHOLD, "default: concentrated categorical columns"),) if keys else ()
    return GroupingSchedule(levels, row_budget, max_levels, "fallback")


def plan_grouping(
    context: Mapping[str, Any],
    schema: TableSchema,
    rows: Sequence[EventRow],
    stats: Sequence[ColumnStats],
    session: Session,
    row_budget: int,
    max_levels: int,
) -> GroupingSchedule:
    columns = [c.name for c in schema.stat_columns]
    if not columns:
        return GroupingSchedule((), row_budget, max_levels, "fallback")
    counts: dict[Entity, int] = {}
    for r in rows:
        for e in r.pivot_entities:
            counts[e] = counts.get(e, 0) + 1
    pivots = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:20]
    payload = {
        "incident": dict(context),
        "table": {"name": schema.name, "description": schema.description},
        "columns": columns,
        "stats": [s.to_dict() for s in stats],
        "pivot_entities": [{"entity": e.token, "rows": n} for e, n in pivots],
        "row_count": len(rows),
        "row_budget": row_budget,
        "max_levels": max_levels,
    }
    o = session.run("grouping_plan", payload)
    if not o.ok:
        log.info("grouping plan for %s suppressed; using default schedule", schema.name)
        return fallback_schedule(schema, stats, row_budget, max_levels)
    levels = tuple(
        GroupingLevel(tuple(lv["group_keys"]), int(lv["support_threshold"]), lv["rationale"])
        for lv in o.output["levels"]
    )
    return GroupingSchedule(levels, row_budget, max_levels, "model")


def _aggregate_id(table: str, level: int, keys: Sequence[tuple[str, Any]], hour: int, first_member: str) -> str:
    # the first member disambiguates identical groups formed in different rounds
    raw = canonical_json([table, level, [list(k) for k in keys], hour, first_member])
    return "agg:" + hashlib.sha1(raw.encode("utf-8")).hexdigest()[:16]


def _make_aggregate(table: str, level_no: int, level: GroupingLevel, hour: int, members: Sequence[EventRow]) -> EventRow:
    first = members[0]
    keys = tuple((k, first.attributes.get(k)) for k in level.group_keys)
    pivots: set[Entity] = set()
    related: set[Entity] = set()
    for m in members:
        pivots |= m.pivot_entities
        related |= m.related_entities
    samples: dict[str, tuple[Any, ...]] = {}
    for col in first.attributes:
        if col in level.group_keys:
            continue
        picked: list[Any] = []
        for m in members:
            v = m.attributes.get(col)
            if v is not None and v not in picked:
                picked.append(v)
                if len(picked) == SAMPLES_PER_COLUMN:
                    break
        samples[col] = tuple(picked)
    meta = AggregateMeta(
        group_keys=keys,
        event_count=len(members),
        entity_count=len(pivots | related),
        sample_values=samples,
        member_row_ids=tuple(m.row_id for m in members),
    )
    return EventRow(
        row_id=_aggregate_id(table, level_no, keys, hour, first.row_id),
        table=table,
        timestamp=from_epoch(hour * 3600),
        pivot_entities=frozenset(pivots),
        related_entities=frozenset(related - pivots),
        attributes=dict(keys),
        is_aggregate=True,
        aggregate_meta=meta,
    )


def aggregate_table(
    rows: Sequence[EventRow],
    schedule: GroupingSchedule,
    level_log: list[dict[str, Any]] | None = None,
) -> list[EventRow]:
    """Apply grouping levels until the row budget is met or levels run out.

    Each level groups the rows still passing through by its keys plus the hour
    bin; groups at or above the support threshold collapse to one aggregate.
    Rows already absorbed by an earlier level are never regrouped.
    """
    if not schedule.levels:
        raise EmptySchedule("grouping schedule has no levels")
    if not rows:
        return []
    tables = {r.table for r in rows}
    if len(tables) != 1 or any(r.is_aggregate or r.is_alert_row for r in rows):
        raise ValueError("aggregate_table expects raw telemetry rows from a single table")
    table = next(iter(tables))
    passthrough = sorted(rows, key=lambda r: (r.timestamp, r.row_id))
    aggregates: list[EventRow] = []
    for level_no, level in enumerate(schedule.levels, start=1):
        if len(aggregates) + len(passthrough) <= schedule.row_budget:
            break
        n_in = len(passthrough)
        hours = np.fromiter((epoch_seconds(r.timestamp) // 3600 for r in passthrough), np.int64, count=n_in)
        cols = [kernels.Interner().encode([r.attributes.get(k) for r in passthrough]) for k in level.group_keys]
        codes, counts = kernels.group_codes(cols + [hours])
        big = counts >= level.support_threshold
        members: dict[int, list[EventRow]] = {}
        keep: list[EventRow] = []
        for r, c in zip(passthrough, codes.tolist()):
            if big[c]:
                members.setdefault(c, []).append(r)
            else:
                keep.append(r)
        new_aggs = [
            _make_aggregate(table, level_no, level, epoch_seconds(ms[0].timestamp) // 3600, ms)
            for _, ms in sorted(members.items())
        ]
        aggregates.extend(new_aggs)
        passthrough = keep
        if level_log is not None:
            level_log.append(
                {
                    "table": table,
                    "level": level_no,
                    "group_keys": list(level.group_keys),
                    "input_rows": n_in,
                    "aggregates": len(new_aggs),
                    "aggregated_events": sum(a.aggregate_meta.event_count for a in new_aggs),
                    "passthrough": len(keep),
                }
            )
    return sorted(aggregates + passthrough, key=lambda r: (r.timestamp, r.row_id))


# ---------------------------------------------------------------------------
# entity selection


def select_entities(
    rows: Sequence[EventRow],
    context: Mapping[str, Any],
    incident_entities: frozenset[Entity],
    session: Session,
    deny: DenyList | None = None,
    max_frontier: int = 10,
) -> EntityFrontier:
    """Round-2 frontier: newly surfaced, non-deny-listed entities chosen by the model."""
    deny = deny or default_deny_list()
    provenance: dict[Entity, list[str]] = {}
    tables: dict[Entity, set[str]] = {}
    for r in rows:
        if r.is_alert_row:
            continue
        for e in r.entities:
            if e in incident_entities or deny.is_low_signal(e):
                continue
            provenance.setdefault(e, []).append(r.row_id)
            tables.setdefault(e, set()).add(r.table)
    if not provenance:
        return EntityFrontier(2, frozenset(), {})
    candidates = sorted(provenance)
    payload = {
        "incident": dict(context),
        "candidates": [e.token for e in candidates],
        "candidate_context": [
            {"entity": e.token, "row_count": len(provenance[e]), "tables": sorted(tables[e])}
            for e in candidates
        ],
        "max_frontier": max_frontier,
    }
    o = session.run("entity_selection", payload)
    if not o.ok:
        return EntityFrontier(2, frozenset(), {})
    chosen = frozenset(Entity.parse(item["entity"]) for item in o.output["selected"])
    return EntityFrontier(2, chosen, {e: tuple(sorted(provenance[e])) for e in chosen})


# ---------------------------------------------------------------------------
# enrichment


def _activity_spans(timeline: ActivityTimeline) -> dict[Entity, tuple[datetime, datetime]]:
    spans: dict[Entity, tuple[datetime, datetime]] = {}
    for r in timeline.rows:
        for e in r.entities:
            lo, hi = spans.get(e, (r.timestamp, r.timestamp))
            spans[e] = (min(lo, r.timestamp), max(hi, r.timestamp))
    return spans


def enrich(timeline: ActivityTimeline, ueba: Sequence[FeedRecord] = (), ti: Sequence[FeedRecord] = ()) -> ActivityTimeline:
    """Attach UEBA and threat-intel annotations to entities present in the timeline."""
    spans = _activity_spans(timeline)
    found: list[Enrichment] = []
    for rec in ti:
        if rec.entity in spans:
            found.append(Enrichment(rec.entity.token, EnrichmentSource.THREAT_INTEL, rec.label, rec.score))
    for rec in ueba:
        span = spans.get(rec.entity)
        if span is None:
            continue
        lo, hi = span
        if rec.window_start is not None and rec.window_start > hi:
            continue
        if rec.window_end is not None and rec.window_end < lo:
            continue
        found.append(Enrichment(rec.entity.token, EnrichmentSource.UEBA, rec.label, rec.score))
    uniq = sorted(set(found), key=lambda e: (e.target, e.source.value, e.label, e.score))
    return ActivityTimeline(timeline.incident_id, timeline.rows, tuple(uniq), timeline.build_stats)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class BuildTrace:
    """Per-round plans, frontiers and schedules, kept for the run report."""

    plans: list[RetrievalPlan] = field(default_factory=list)
    frontiers: list[EntityFrontier] = field(default_factory=list)
    schedules: dict[str, dict[str, Any]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    rounds_executed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "rounds_executed": self.rounds_executed,
            "plans": [p.to_dict() for p in self.plans],
            "frontiers": [f.to_dict() for f in self.frontiers],
            "schedules": dict(sorted(self.schedules.items())),
            "errors": list(self.errors),
        }


def _compress(
    rows: list[EventRow],
    store: TelemetryStore,
    context: Mapping[str, Any],
    session: Session,
    config: RunConfig,
    round_no: int,
    trace: BuildTrace,
    level_log: list[dict[str, Any]],
) -> list[EventRow]:
    by_table: dict[str, list[EventRow]] = {}
    for r in rows:
        by_table.setdefault(r.table, []).append(r)
    out: list[EventRow] = []
    for name in sorted(by_table):
        trows = by_table[name]
        if len(trows) <= config.row_budget:
            out.extend(trows)
            continue
        schema = store.schema(name)
        stats = column_stats(schema, trows)
        schedule = plan_grouping(context, schema, trows, stats, session, config.row_budget, config.max_levels)
        trace.schedules[f"{round_no}:{name}"] = schedule.to_dict()
        if not schedule.levels:
            out.extend(trows)
            continue
        out.extend(aggregate_table(trows, schedule, level_log))
    return out


def build_timeline(
    incident: Incident,
    store: TelemetryStore,
    session: Session,
    feeds: Feeds | None = None,
    config: RunConfig | None = None,
    deny: DenyList | None = None,
    trace: BuildTrace | None = None,
) -> ActivityTimeline:
    """Two rounds of select/expand/aggregate/select-entities, then enrichment.

    Lookback windows are anchored at the incident's creation time in both
    rounds.  Alert rows come first in the result, followed by telemetry rows in
    (timestamp, row_id) order.
    """
    config = config or RunConfig()
    feeds = feeds or Feeds()
    trace = trace if trace is not None else BuildTrace()
    context = summarize_incident(incident).payload()
    alert_rows = sorted((alert_row(a) for a in incident.alerts), key=lambda r: (r.timestamp, r.row_id))
    now = incident.created_at
    frontier = EntityFrontier(1, incident.entities, {})
    seen: set[str] = set()
    telemetry: list[EventRow] = []
    raw_total = 0
    selected_tables: set[str] = set()
    round_stats: list[dict[str, Any]] = []
    schemas = store.schemas
    for round_no in range(1, MAX_ROUNDS + 1):
        trace.frontiers.append(frontier)
        if schemas:
            plan = select_tables(context, frontier, schemas, session, config.max_lookback_hours)
        else:
            plan = RetrievalPlan(round_no, ())
        trace.plans.append(plan)
        selected_tables |= {d.table for d in plan.selected}
        raw = expand(frontier, plan, store, now, seen, config.row_cap, trace.errors, session)
        seen |= {r.row_id for r in raw}
        level_log: list[dict[str, Any]] = []
        compressed = _compress(raw, store, context, session, config, round_no, trace, level_log)
        telemetry.extend(compressed)
        raw_total += len(raw)
        round_stats.append(
            {
                "round": round_no,
                "frontier_size": len(frontier.entities),
                "tables_selected": sorted(d.table for d in plan.selected),
                "raw_rows": len(raw),
                "post_aggregation_rows": len(compressed),
                "levels": level_log,
            }
        )
        trace.rounds_executed = round_no
        if round_no < MAX_ROUNDS:
            frontier = select_entities(
                alert_rows + telemetry, context, incident.entities, session, deny, config.max_frontier
            )
    telemetry.sort(key=lambda r: (r.timestamp, r.row_id))
    stats = BuildStats(raw_total, len(telemetry), len(selected_tables), tuple(round_stats))
    timeline = ActivityTimeline(incident.incident_id, tuple(alert_rows + telemetry), (), stats)
    return enrich(timeline, feeds.ueba, feeds.ti)

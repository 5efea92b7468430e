"""Domain vocabulary: entities, telemetry rows, alerts and incidents.

Every type here is an immutable value object with a ``to_dict``/``from_dict``
pair; the dict form is what lands in line-delimited JSON files.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import EmptyValue, MalformedIp, RecordError, UnknownTechnique

TECHNIQUE_RE = re.compile(r"^T\d{4}(\.\d{3})?$")


class EntityKind(str, Enum):
    USER = "User"
    DEVICE = "Device"
    IP = "Ip"
    FILE_HASH = "FileHash"
    EMAIL = "Email"
    URL = "Url"
    PROCESS = "Process"
    CLOUD_RESOURCE = "CloudResource"


class Severity(str, Enum):
    INFORMATIONAL = "Informational"
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"

    @property
    def rank(self) -> int:
        return _SEVERITY_ORDER.index(self)


_SEVERITY_ORDER = [Severity.INFORMATIONAL, Severity.LOW, Severity.MEDIUM, Severity.HIGH]


class Phase(str, Enum):
    INITIAL_ACCESS = "InitialAccess"
    EXECUTION = "Execution"
    POST_COMPROMISE = "PostCompromise"

    @property
    def short(self) -> str:
        return {"InitialAccess": "IA", "Execution": "EX", "PostCompromise": "PC"}[self.value]


# ---------------------------------------------------------------------------
# time helpers


def parse_time(text: str) -> datetime:
    """Parse an RFC 3339 instant into an aware UTC datetime."""
    if not isinstance(text, str):
        raise RecordError(f"timestamp must be a string, got {type(text).__name__}")
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError as exc:
        raise RecordError(f"bad timestamp {text!r}") from exc
    if dt.tzinfo is None:
        raise RecordError(f"timestamp {text!r} lacks a UTC offset")
    return dt.astimezone(timezone.utc)


def format_time(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def epoch_seconds(dt: datetime) -> int:
    return int(dt.timestamp())


def from_epoch(seconds: int) -> datetime:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc)


def canonical_json(obj: Any) -> str:
    """Stable serialization: sorted keys, no whitespace, UTF-8 preserved."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# entities


def _canonical_ipv4(raw: str) -> str | None:
    parts = raw.split(".")
    if len(parts) != 4:
        return None
    octets = []
    for p in parts:
        if not p.isdigit() or len(p) > 3:
            return None
        v = int(p, 10)
        if v > 255:
            return None
        octets.append(str(v))
    return ".".join(octets)


def _canonical_ip(raw: str) -> str:
    import ipaddress

    v4 = _canonical_ipv4(raw)
    if v4 is not None:
        return v4
    try:
        addr = ipaddress.IPv6Address(raw)
    except ValueError as exc:
        raise MalformedIp(f"not an IP address: {raw!r}") from exc
    if addr.ipv4_mapped is not None:
        return str(addr.ipv4_mapped)
    return addr.compressed


def _normalize_value(kind: EntityKind, raw: str) -> str:
    if not isinstance(raw, str):
        raise EmptyValue(f"{kind.value} value must be a string")
    value = raw.strip()
    if not value:
        raise EmptyValue(f"empty {kind.value} value")
    if kind is EntityKind.IP:
        return _canonical_ip(value)
    return value.casefold()


@dataclass(frozen=True, order=True)
class Entity:
    kind: EntityKind
    value: str

    def __post_init__(self) -> None:
        if not isinstance(self.kind, EntityKind):
            object.__setattr__(self, "kind", EntityKind(self.kind))
        if not self.value or _normalize_value(self.kind, self.value) != self.value:
            raise EmptyValue(f"entity value {self.value!r} is not normalized; use normalize_entity")

    @property
    def token(self) -> str:
        """Compact ``Kind:value`` form used inside model payloads."""
        return f"{self.kind.value}:{self.value}"

    @classmethod
    def parse(cls, token: str) -> "Entity":
        kind, sep, value = token.partition(":")
        if not sep:
            raise RecordError(f"bad entity token {token!r}")
        try:
            return normalize_entity(EntityKind(kind), value)
        except ValueError as exc:
            raise RecordError(f"bad entity token {token!r}") from exc

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind.value, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Entity":
        try:
            return normalize_entity(EntityKind(d["kind"]), d["value"])
        except (KeyError, ValueError) as exc:
            if isinstance(exc, (EmptyValue, MalformedIp)):
                raise
            raise RecordError(f"bad entity record {d!r}") from exc

    def __str__(self) -> str:
        return self.token


def normalize_entity(kind: EntityKind | str, raw: str) -> Entity:
    """Build an entity with its value trimmed, case-folded and, for IPs, canonicalized.

    >>> normalize_entity("User", " ALICE@Corp.COM ").value
    'alice@corp.com'
    """
    kind = EntityKind(kind)
    return Entity(kind, _normalize_value(kind, raw))


def _entities_to_list(entities: Iterable[Entity]) -> list[dict[str, str]]:
    return [e.to_dict() for e in sorted(entities)]


def _entities_from_list(items: Iterable[Mapping[str, Any]]) -> frozenset[Entity]:
    return frozenset(Entity.from_dict(d) for d in items)


# ---------------------------------------------------------------------------
# ATT&CK


@lru_cache(maxsize=1)
def attack_catalog() -> dict[str, dict[str, Any]]:
    text = resources.files("threatgap.data").joinpath("attack_mapping.json").read_text("utf-8")
    return json.loads(text)["techniques"]


def technique_name(technique: str) -> str:
    return attack_catalog()[_catalog_key(technique)]["name"]


def _catalog_key(technique: str) -> str:
    if not isinstance(technique, str) or not TECHNIQUE_RE.match(technique):
        raise UnknownTechnique(f"malformed technique id {technique!r}")
    catalog = attack_catalog()
    if technique in catalog:
        return technique
    parent = technique.split(".")[0]
    if parent in catalog:
        return parent
    raise UnknownTechnique(technique)


def phase_of_technique(technique: str) -> Phase:
    """Bucket a technique into one of the three lifecycle phases.

    A technique listed under several tactics takes the earliest phase any of
    them maps to (initial-access before execution before everything else).
    Sub-techniques inherit their parent's tactics.
    """
    tactics = attack_catalog()[_catalog_key(technique)]["tactics"]
    if "initial-access" in tactics:
        return Phase.INITIAL_ACCESS
    if "execution" in tactics:
        return Phase.EXECUTION
    return Phase.POST_COMPROMISE


def is_known_technique(technique: str) -> bool:
    try:
        _catalog_key(technique)
    except UnknownTechnique:
        return False
    return True


# ---------------------------------------------------------------------------
# telemetry rows


@dataclass(frozen=True)
class AggregateMeta:
    group_keys: tuple[tuple[str, Any], ...]
    event_count: int
    entity_count: int
    sample_values: Mapping[str, tuple[Any, ...]]
    member_row_ids: tuple[str, ...]
    bin_hours: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "group_keys": [[k, v] for k, v in self.group_keys],
            "event_count": self.event_count,
            "entity_count": self.entity_count,
            "sample_values": {k: list(v) for k, v in self.sample_values.items()},
            "member_row_ids": list(self.member_row_ids),
            "bin_hours": self.bin_hours,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AggregateMeta":
        return cls(
            group_keys=tuple((k, v) for k, v in d["group_keys"]),
            event_count=int(d["event_count"]),
            entity_count=int(d["entity_count"]),
            sample_values={k: tuple(v) for k, v in d["sample_values"].items()},
            member_row_ids=tuple(d.get("member_row_ids", ())),
            bin_hours=int(d.get("bin_hours", 1)),
        )


@dataclass(frozen=True)
class EventRow:
    row_id: str
    table: str
    timestamp: datetime
    pivot_entities: frozenset[Entity]
    related_entities: frozenset[Entity]
    attributes: Mapping[str, Any]
    is_aggregate: bool = False
    aggregate_meta: AggregateMeta | None = None
    is_alert_row: bool = False

    def __post_init__(self) -> None:
        if self.is_aggregate != (self.aggregate_meta is not None):
            raise RecordError(f"row {self.row_id}: is_aggregate must match aggregate_meta presence")
        if not self.is_aggregate and not (self.pivot_entities or self.related_entities):
            raise RecordError(f"row {self.row_id}: non-aggregate row carries no entities")

    @property
    def entities(self) -> frozenset[Entity]:
        return self.pivot_entities | self.related_entities

    def covered_row_ids(self) -> tuple[str, ...]:
        """Raw rows this row stands for (its members when it is an aggregate)."""
        if self.aggregate_meta is not None:
            return self.aggregate_meta.member_row_ids
        return (self.row_id,)

    def to_dict(self) -> dict[str, Any]:
        return {
            "row_id": self.row_id,
            "table": self.table,
            "timestamp": format_time(self.timestamp),
            "pivot_entities": _entities_to_list(self.pivot_entities),
            "related_entities": _entities_to_list(self.related_entities),
            "attributes": dict(self.attributes),
            "is_aggregate": self.is_aggregate,
            "aggregate_meta": self.aggregate_meta.to_dict() if self.aggregate_meta else None,
            "is_alert_row": self.is_alert_row,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EventRow":
        meta = d.get("aggregate_meta")
        return cls(
            row_id=d["row_id"],
            table=d["table"],
            timestamp=parse_time(d["timestamp"]),
            pivot_entities=_entities_from_list(d.get("pivot_entities", ())),
            related_entities=_entities_from_list(d.get("related_entities", ())),
            attributes=dict(d.get("attributes", {})),
            is_aggregate=bool(d.get("is_aggregate", False)),
            aggregate_meta=AggregateMeta.from_dict(meta) if meta else None,
            is_alert_row=bool(d.get("is_alert_row", False)),
        )

    def payload(self) -> dict[str, Any]:
        """Compact view handed to model contracts."""
        out: dict[str, Any] = {
            "row_id": self.row_id,
            "table": self.table,
            "timestamp": format_time(self.timestamp),
            "entities": sorted(e.token for e in self.entities),
            "attributes": dict(self.attributes),
        }
        if self.aggregate_meta is not None:
            m = self.aggregate_meta
            out["aggregate"] = {
                "group_keys": {k: v for k, v in m.group_keys},
                "event_count": m.event_count,
                "entity_count": m.entity_count,
                "samples": {k: list(v) for k, v in m.sample_values.items()},
            }
        return out


# ---------------------------------------------------------------------------
# alerts and incidents


@dataclass(frozen=True)
class Alert:
    alert_id: str
    detector_id: str
    title: str
    severity: Severity
    techniques: tuple[str, ...]
    phase: Phase
    entities: frozenset[Entity]
    timestamp: datetime

    def __post_init__(self) -> None:
        object.__setattr__(self, "severity", Severity(self.severity))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "techniques", tuple(self.techniques))
        if not self.techniques:
            raise RecordError(f"alert {self.alert_id}: no techniques")
        for t in self.techniques:
            if not TECHNIQUE_RE.match(t):
                raise RecordError(f"alert {self.alert_id}: malformed technique {t!r}")
        # first technique decides; the others only need to exist in the mapping
        mapped = phase_of_technique(self.techniques[0])
        for t in self.techniques[1:]:
            phase_of_technique(t)
        if mapped is not self.phase:
            raise RecordError(
                f"alert {self.alert_id}: phase {self.phase.value} disagrees with "
                f"{self.techniques[0]} -> {mapped.value}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "detector_id": self.detector_id,
            "title": self.title,
            "severity": self.severity.value,
            "techniques": list(self.techniques),
            "phase": self.phase.value,
            "entities": _entities_to_list(self.entities),
            "timestamp": format_time(self.timestamp),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Alert":
        try:
            return cls(
                alert_id=d["alert_id"],
                detector_id=d["detector_id"],
                title=d["title"],
                severity=Severity(d["severity"]),
                techniques=tuple(d["techniques"]),
                phase=Phase(d["phase"]),
                entities=_entities_from_list(d["entities"]),
                timestamp=parse_time(d["timestamp"]),
            )
        except KeyError as exc:
            raise RecordError(f"alert record missing field {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, RecordError):
                raise
            raise RecordError(str(exc)) from exc


@dataclass(frozen=True)
class Incident:
    incident_id: str
    alerts: tuple[Alert, ...]
    threat_type: str
    priority_score: float
    created_at: datetime

    def __post_init__(self) -> None:
        object.__setattr__(self, "alerts", tuple(self.alerts))
        if not self.alerts:
            raise RecordError(f"incident {self.incident_id}: no alerts")
        if not 0.0 <= self.priority_score <= 1.0:
            raise RecordError(f"incident {self.incident_id}: priority_score out of [0,1]")
        if not self.entities:
            raise RecordError(f"incident {self.incident_id}: no entities")
        ids = [a.alert_id for a in self.alerts]
        if len(set(ids)) != len(ids):
            raise RecordError(f"incident {self.incident_id}: duplicate alert ids")

    @property
    def entities(self) -> frozenset[Entity]:
        out: set[Entity] = set()
        for a in self.alerts:
            out |= a.entities
        return frozenset(out)

    @property
    def techniques(self) -> frozenset[str]:
        return frozenset(t for a in self.alerts for t in a.techniques)

    @property
    def phases(self) -> frozenset[Phase]:
        return frozenset(a.phase for a in self.alerts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "alerts": [a.to_dict() for a in self.alerts],
            "threat_type": self.threat_type,
            "priority_score": self.priority_score,
            "created_at": format_time(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Incident":
        try:
            return cls(
                incident_id=d["incident_id"],
                alerts=tuple(Alert.from_dict(a) for a in d["alerts"]),
                threat_type=d["threat_type"],
                priority_score=float(d["priority_score"]),
                created_at=parse_time(d["created_at"]),
            )
        except KeyError as exc:
            raise RecordError(f"incident record missing field {exc}") from exc


# ---------------------------------------------------------------------------
# line-delimited files


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: {exc.msg}") from exc


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def load_incidents(path: str | Path) -> list[Incident]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(Incident.from_dict(rec))
        except RecordError as exc:
            raise RecordError(f"{path}:{lineno}: {exc}") from exc
    return out


def dump_incidents(path: str | Path, incidents: Iterable[Incident]) -> None:
    write_jsonl(path, (i.to_dict() for i in incidents))

"""Read-only, file-backed telemetry store with entity and hourly time indexes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DuplicateTable, EmptyRowSet, RecordError, SchemaViolation, UnknownTable
from .model import (
    Entity,
    EntityKind,
    EventRow,
    epoch_seconds,
    from_epoch,
    iter_jsonl,
    normalize_entity,
    parse_time,
)

log = logging.getLogger(__name__)

SCALAR_TYPES = ("string", "int", "float", "timestamp", "bool")
DEFAULT_ROW_CAP = 20_000
DEFAULT_MAX_LOOKBACK_HOURS = 720
RESERVED = ("row_id", "timestamp")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    type: str
    entity_kind: EntityKind | None = None

    def __post_init__(self) -> None:
        if self.type not in SCALAR_TYPES:
            raise SchemaViolation(f"column {self.name}: unknown type {self.type!r}")
        if self.entity_kind is not None:
            object.__setattr__(self, "entity_kind", EntityKind(self.entity_kind))
            if self.type != "string":
                raise SchemaViolation(f"column {self.name}: entity columns must be strings")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "type": self.type,
            "entity_kind": self.entity_kind.value if self.entity_kind else None,
        }


@dataclass(frozen=True)
class TableSchema:
    name: str
    description: str
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaViolation(f"table {self.name}: duplicate column names")
        clash = set(names) & set(RESERVED)
        if clash:
            raise SchemaViolation(f"table {self.name}: reserved column names {sorted(clash)}")
        if not self.pivotable_columns:
            raise SchemaViolation(f"table {self.name}: no entity-tagged (pivotable) column")

    @property
    def pivotable_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.entity_kind is not None)

    @property
    def pivot_kinds(self) -> frozenset[EntityKind]:
        return frozenset(c.entity_kind for c in self.pivotable_columns)

    @property
    def stat_columns(self) -> tuple[ColumnSpec, ...]:
        """Columns eligible for grouping statistics: no entities, no timestamps."""
        return tuple(c for c in self.columns if c.entity_kind is None and c.type != "timestamp")

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "columns": [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TableSchema":
        try:
            cols = tuple(
                ColumnSpec(c["name"], c["type"], c.get("entity_kind")) for c in d["columns"]
            )
            return cls(d["name"], d.get("description", ""), cols)
        except (KeyError, ValueError) as exc:
            if isinstance(exc, SchemaViolation):
                raise
            raise SchemaViolation(f"bad schema record: {exc}") from exc


@dataclass(frozen=True)
class ColumnStats:
    column: str
    null_rate: float
    distinct_count: int
    largest_group_fraction: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "column": self.column,
            "null_rate": self.null_rate,
            "distinct_count": self.distinct_count,
            "largest_group_fraction": self.largest_group_fraction,
        }


@dataclass(frozen=True)
class QuerySpec:
    table: str
    entities: frozenset[Entity]
    start: datetime
    end: datetime
    row_cap: int = DEFAULT_ROW_CAP

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", frozenset(self.entities))
        if not self.entities:
            raise ValueError("QuerySpec needs at least one entity")
        if not self.start < self.end:
            raise ValueError("QuerySpec window must satisfy start < end")
        if self.row_cap <= 0:
            raise ValueError("row_cap must be positive")


@dataclass(frozen=True)
class QueryResult:
    rows: tuple[EventRow, ...]
    truncated: bool
    matched: int

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def _check_scalar(col: ColumnSpec, value: Any) -> Any:
    if value is None:
        return None
    t = col.type
    if t == "string" and isinstance(value, str):
        return value
    if t == "int" and isinstance(value, int) and not isinstance(value, bool):
        return value
    if t == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if t == "bool" and isinstance(value, bool):
        return value
    if t == "timestamp" and isinstance(value, str):
        parse_time(value)
        return value
    raise TypeError(f"expected {t}, got {type(value).__name__}")


class _Table:
    """Column-oriented storage for one registered table, sorted by (timestamp, row_id)."""

    def __init__(self, schema: TableSchema, records: list[dict[str, Any]]):
        self.schema = schema
        records.sort(key=lambda r: (r["_ts"], r["row_id"]))
        self.row_ids = [r["row_id"] for r in records]
        self.ts = np.fromiter((r["_ts"] for r in records), dtype=np.int64, count=len(records))
        self.attributes = [{c.name: r.get(c.name) for c in schema.columns} for r in records]
        self.entity_values: list[tuple[Entity, ...]] = []
        entity_index: dict[Entity, list[int]] = {}
        pivot_cols = schema.pivotable_columns
        for i, r in enumerate(records):
            ents = []
            for c in pivot_cols:
                v = r.get(c.name)
                if v is not None:
                    e = normalize_entity(c.entity_kind, v)
                    ents.append(e)
                    entity_index.setdefault(e, []).append(i)
            self.entity_values.append(tuple(ents))
        self.entity_index = {e: np.unique(np.asarray(ix, dtype=np.int64)) for e, ix in entity_index.items()}
        # hourly buckets: bucket -> first row offset, in ascending bucket order
        hours = self.ts // 3600
        self.hour_keys, self.hour_starts = np.unique(hours, return_index=True)

    def __len__(self) -> int:
        return len(self.row_ids)

    def window_slice(self, start: int, end: int) -> tuple[int, int]:
        """Row offsets covering every hourly bucket that overlaps [start, end]."""
        lo_b = np.searchsorted(self.hour_keys, start // 3600, side="left")
        hi_b = np.searchsorted(self.hour_keys, end // 3600, side="right")
        lo = int(self.hour_starts[lo_b]) if lo_b < self.hour_keys.size else len(self)
        hi = int(self.hour_starts[hi_b]) if hi_b < self.hour_keys.size else len(self)
        return lo, hi

    def make_row(self, i: int, pivots: frozenset[Entity]) -> EventRow:
        ents = frozenset(self.entity_values[i])
        pivot = ents & pivots
        return EventRow(
            row_id=self.row_ids[i],
            table=self.schema.name,
            timestamp=from_epoch(int(self.ts[i])),
            pivot_entities=pivot,
            related_entities=ents - pivot,
            attributes=self.attributes[i],
        )


class TelemetryStore:
    """Immutable after registration; any number of threads may query concurrently."""

    def __init__(self, max_lookback_hours: int = DEFAULT_MAX_LOOKBACK_HOURS):
        self.max_lookback_hours = max_lookback_hours
        self._tables: dict[str, _Table] = {}
        self._row_ids: set[str] = set()

    # -- registration ---------------------------------------------------
    def register_table(self, schema: TableSchema, data_path: str | Path) -> "TableHandle":
        if schema.name in self._tables:
            raise DuplicateTable(schema.name)
        data_path = Path(data_path)
        if not data_path.exists():
            raise FileNotFoundError(data_path)
        return self.register_records(schema, (rec for _, rec in iter_jsonl(data_path)))

    def register_records(self, schema: TableSchema, records: Iterable[Mapping[str, Any]]) -> "TableHandle":
        if schema.name in self._tables:
            raise DuplicateTable(schema.name)
        known = {c.name for c in schema.columns} | set(RESERVED)
        cols = {c.name: c for c in schema.columns}
        rows: list[dict[str, Any]] = []
        seen: set[str] = set()
        for n, rec in enumerate(records, start=1):
            extra = set(rec) - known
            if extra:
                raise SchemaViolation(f"{schema.name} row {n}: unknown column {sorted(extra)[0]}", n, sorted(extra)[0])
            rid = rec.get("row_id")
            if not isinstance(rid, str) or not rid:
                raise SchemaViolation(f"{schema.name} row {n}: missing row_id", n, "row_id")
            if rid in seen or rid in self._row_ids:
                raise SchemaViolation(f"{schema.name} row {n}: duplicate row_id {rid}", n, "row_id")
            seen.add(rid)
            try:
                ts = parse_time(rec.get("timestamp"))
            except RecordError as exc:
                raise SchemaViolation(f"{schema.name} row {n}: {exc}", n, "timestamp") from exc
            out: dict[str, Any] = {"row_id": rid, "_ts": epoch_seconds(ts)}
            for name, col in cols.items():
                try:
                    value = _check_scalar(col, rec.get(name))
                    if col.entity_kind is not None and value is not None:
                        value = normalize_entity(col.entity_kind, value).value
                except (TypeError, ValueError) as exc:
                    raise SchemaViolation(f"{schema.name} row {n} column {name}: {exc}", n, name) from exc
                out[name] = value
            if not any(out[c.name] is not None for c in schema.pivotable_columns):
                raise SchemaViolation(f"{schema.name} row {n}: no entity values", n, None)
            rows.append(out)
        table = _Table(schema, rows)
        self._tables[schema.name] = table
        self._row_ids |= seen
        log.debug("registered %s with %d rows", schema.name, len(table))
        return TableHandle(self, schema.name)

    def load_manifest(self, manifest_path: str | Path) -> list["TableHandle"]:
        """Register every table listed in a manifest file (paths relative to it)."""
        manifest_path = Path(manifest_path)
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        handles = []
        for entry in doc["tables"]:
            schema = TableSchema.from_dict(entry)
            handles.append(self.register_table(schema, manifest_path.parent / entry["data"]))
        return handles

    # -- introspection --------------------------------------------------
    @property
    def schemas(self) -> list[TableSchema]:
        return [t.schema for t in self._tables.values()]

    def schema(self, table: str) -> TableSchema:
        return self._table(table).schema

    def row_count(self, table: str) -> int:
        return len(self._table(table))

    def _table(self, name: str) -> _Table:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTable(name) from None

    def has_row(self, row_id: str) -> bool:
        return row_id in self._row_ids

    # -- queries --------------------------------------------------------
    def query_events(self, spec: QuerySpec) -> QueryResult:
        t = self._table(spec.table)
        if spec.end - spec.start > timedelta(hours=self.max_lookback_hours):
            raise ValueError(
                f"query window exceeds the {self.max_lookback_hours}h lookback limit"
            )
        start, end = epoch_seconds(spec.start), epoch_seconds(spec.end)
        lo, hi = t.window_slice(start, end)
        hits = [t.entity_index[e] for e in spec.entities if e in t.entity_index]
        if not hits or lo >= hi:
            return QueryResult((), False, 0)
        idx = np.unique(np.concatenate(hits))
        idx = idx[(idx >= lo) & (idx < hi)]
        idx = idx[kernels.window_mask(t.ts[idx], start, end)]
        matched = int(idx.size)
        truncated = matched > spec.row_cap
        idx = idx[: spec.row_cap]
        rows = tuple(t.make_row(int(i), spec.entities) for i in idx)
        return QueryResult(rows, truncated, matched)

    def column_stats(self, table: str, rows: Sequence[EventRow]) -> list[ColumnStats]:
        schema = self._table(table).schema
        return column_stats(schema, rows)


@dataclass(frozen=True)
class TableHandle:
    store: TelemetryStore
    name: str

    def row_count(self) -> int:
        return self.store.row_count(self.name)

    @property
    def schema(self) -> TableSchema:
        return self.store.schema(self.name)


def column_stats(schema: TableSchema, rows: Sequence[EventRow]) -> list[ColumnStats]:
    """Null rate, distinct count and largest-group share per non-entity, non-time column."""
    if not rows:
        raise EmptyRowSet(schema.name)
    for r in rows:
        if r.table != schema.name or r.is_aggregate:
            raise ValueError(f"column_stats expects raw rows of {schema.name}, got {r.row_id}")
    n = len(rows)
    out = []
    for col in schema.stat_columns:
        codes = kernels.Interner().encode([r.attributes.get(col.name) for r in rows])
        nulls, distinct, biggest = kernels.column_summary(codes)
        out.append(ColumnStats(col.name, nulls / n, distinct, biggest / n))
    return out

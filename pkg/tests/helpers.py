"""Builders shared across the test modules."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from functools import lru_cache
from typing import Any, Callable, Iterable, Mapping

from threatgap.backends import CallableBackend, ScriptedOracle
from threatgap.errors import BackendFailure
from threatgap.evaluation.analyst import ScriptedAnalyst
from threatgap.evaluation.scenarios import Scenario, scenario_from_name
from threatgap.gateway import CompletionRequest, Gateway, get_price_profile
from threatgap.model import Alert, Entity, EventRow, Incident, parse_time, phase_of_technique

T0 = datetime(2024, 5, 1, 12, 0, tzinfo=timezone.utc)


@lru_cache(maxsize=None)
def cached_scenario(name: str) -> Scenario:
    return scenario_from_name(name)


def ent(token: str) -> Entity:
    return Entity.parse(token)


def ents(*tokens: str) -> frozenset[Entity]:
    return frozenset(ent(t) for t in tokens)


def make_alert(
    alert_id: str,
    techniques: Iterable[str],
    entities: Iterable[str],
    detector: str = "det-a",
    ts: datetime | str = T0,
    title: str | None = None,
    severity: str = "High",
) -> Alert:
    techniques = tuple(techniques)
    return Alert(
        alert_id=alert_id,
        detector_id=detector,
        title=title or f"alert {alert_id}",
        severity=severity,
        techniques=techniques,
        phase=phase_of_technique(techniques[0]),
        entities=ents(*entities),
        timestamp=parse_time(ts) if isinstance(ts, str) else ts,
    )


def make_incident(alerts: Iterable[Alert], incident_id: str = "inc-1", priority: float = 0.5,
                  threat_type: str = "ransomware", created_at: datetime | None = None) -> Incident:
    alerts = tuple(alerts)
    created = created_at or max(a.timestamp for a in alerts) + timedelta(hours=1)
    return Incident(incident_id, alerts, threat_type, priority, created)


def make_row(row_id: str, table: str = "T", ts: datetime = T0, pivots: Iterable[str] = (),
             related: Iterable[str] = (), alert: bool = False, **attributes: Any) -> EventRow:
    return EventRow(
        row_id=row_id,
        table=table,
        timestamp=ts,
        pivot_entities=ents(*pivots),
        related_entities=ents(*related),
        attributes=attributes,
        is_alert_row=alert,
    )


Handler = Callable[[Mapping[str, Any], CompletionRequest], Any]


def policy_backend(handlers: Mapping[str, Handler]) -> CallableBackend:
    """Backend answering each contract with ``handlers[contract_id](payload, request)``."""

    def answer(request: CompletionRequest) -> Any:
        fn = handlers.get(request.contract_id)
        if fn is None:
            raise BackendFailure(f"test policy has no handler for {request.contract_id}")
        return fn(request.payload, request)

    return CallableBackend(answer)


def gateway_for(backend, **kw) -> Gateway:
    return Gateway(backend, get_price_profile("default"), **kw)


def analyst_backend(*scenarios: Scenario) -> ScriptedOracle:
    return ScriptedOracle({}, fallback=ScriptedAnalyst(scenarios))


def analyst_gateway(*scenarios: Scenario, **kw) -> Gateway:
    return gateway_for(analyst_backend(*scenarios), **kw)

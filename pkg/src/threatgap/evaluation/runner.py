"""The offline evaluation matrix: scenarios x held-out phases x repeats x variants."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from ..alerting import DynamicAlert, emit
from ..config import DenyList, RunConfig
from ..errors import BackendFailure, PhaseNotPresent, WouldEmptyIncident
from ..gateway import ContractOutcome, Gateway, usage_report
from ..model import Phase, canonical_json
from ..pipeline import run_incident
from ..timeline import BuildTrace, build_timeline
from .metrics import PHASES, compute_metrics, render_report
from .protocol import HoldOutSpec, hold_out, run_baseline, score_recovery
from .scenarios import Scenario

log = logging.getLogger(__name__)

TIMELINE_CONTRACTS = frozenset({"table_selection", "grouping_plan", "entity_selection"})


@dataclass(frozen=True)
class RunKey:
    scenario_id: str
    phase: Phase
    repeat: int

    @property
    def stem(self) -> str:
        return f"{self.scenario_id}-{self.phase.short}-r{self.repeat}"


def run_seed(seed: int, repeat: int) -> int:
    """Distinct, reproducible seed per repeat."""
    return seed * 1000 + repeat


def _report(
    key: RunKey,
    variant: str,
    seed: int,
    spec: HoldOutSpec,
    scenario: Scenario,
    alerts: Sequence[DynamicAlert],
    outcomes: Sequence[ContractOutcome],
    status: str,
    error: str | None,
    build: dict[str, Any] | None,
    extra: dict[str, Any],
) -> dict[str, Any]:
    counts = score_recovery(alerts, spec, scenario.ground_truth)
    return {
        "scenario_id": key.scenario_id,
        "phase": key.phase.value,
        "repeat": key.repeat,
        "run_seed": seed,
        "variant": variant,
        "status": status,
        "error": error,
        **counts.to_dict(),
        "removed_alerts": len(spec.removed_alert_ids),
        "visible_alerts": spec.visible_alert_count,
        "alert_ids": [a.alert_id for a in alerts],
        "build": build,
        "usage": usage_report(outcomes),
        **extra,
    }


def evaluate_cell(
    scenario: Scenario,
    phase: Phase,
    repeat: int,
    gateway: Gateway,
    config: RunConfig,
    deny: DenyList | None = None,
    baseline: bool = True,
    full: bool = True,
    out_dir: Path | None = None,
) -> list[dict[str, Any]]:
    """Run one (scenario, phase, repeat) cell; both variants share one timeline."""
    key = RunKey(scenario.scenario_id, phase, repeat)
    seed = run_seed(config.seed, repeat)
    incident, spec = hold_out(scenario, phase)
    store, feeds = scenario.store(config.max_lookback_hours), scenario.feeds()
    reports = []
    timeline = None
    build_outcomes: list[ContractOutcome] = []
    if full:
        session = gateway.session()
        run = run_incident(incident, store, session, feeds, config, deny)
        timeline = run.timeline
        build_outcomes = [o for o in run.outcomes if o.contract_id in TIMELINE_CONTRACTS]
        inv = run.investigation
        reports.append(
            _report(
                key, "full", seed, spec, scenario, run.alerts, run.outcomes, run.status, run.error,
                timeline.build_stats.to_dict() if timeline else None,
                {
                    "expansion_rounds": run.trace.rounds_executed,
                    "investigation_rounds": inv.rounds_executed if inv else 0,
                    "tasks": len(inv.tasks) if inv else 0,
                    "max_tasks_total": inv.budget.max_tasks_total if inv else None,
                    "evidence": len(inv.evidence) if inv else 0,
                },
            )
        )
        if out_dir is not None:
            _write_artifacts(out_dir, key, "full", run.alerts, reports[-1], run.transcript())
    if baseline:
        status, error, alerts = "ok", None, []
        session = gateway.session()
        trace = BuildTrace()
        try:
            if timeline is None:
                timeline = build_timeline(incident, store, session, feeds, config, deny, trace)
            alerts = run_baseline(timeline, incident, session)
        except BackendFailure as exc:
            status, error = "failed", str(exc)
        outcomes = build_outcomes + session.outcomes
        reports.append(
            _report(
                key, "baseline", seed, spec, scenario, alerts, outcomes, status, error,
                timeline.build_stats.to_dict() if timeline else None,
                {"expansion_rounds": trace.rounds_executed if not full else reports[0]["expansion_rounds"]},
            )
        )
        if out_dir is not None:
            _write_artifacts(out_dir, key, "baseline", alerts, reports[-1], None)
    if out_dir is not None and timeline is not None:
        path = out_dir / "timelines" / f"{key.stem}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(timeline.serialize() + "\n", encoding="utf-8")
        inc_path = out_dir / "incidents" / f"{key.stem}.json"
        inc_path.parent.mkdir(parents=True, exist_ok=True)
        inc_path.write_text(canonical_json(incident.to_dict()) + "\n", encoding="utf-8")
    return reports


def _write_artifacts(
    out_dir: Path, key: RunKey, variant: str, alerts: Sequence[DynamicAlert],
    report: dict[str, Any], transcript: dict[str, Any] | None,
) -> None:
    runs = out_dir / "runs" / variant
    runs.mkdir(parents=True, exist_ok=True)
    (runs / f"{key.stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    alert_dir = out_dir / "alerts" / variant
    alert_dir.mkdir(parents=True, exist_ok=True)
    sink = alert_dir / f"{key.stem}.jsonl"
    sink.unlink(missing_ok=True)
    sink.touch()
    emit(alerts, sink)
    if transcript is not None:
        tdir = out_dir / "transcripts"
        tdir.mkdir(parents=True, exist_ok=True)
        (tdir / f"{key.stem}.json").write_text(json.dumps(transcript, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(
    scenarios: Sequence[Scenario],
    gateway_for: Callable[[Scenario], Gateway],
    config: RunConfig,
    repeats: int = 3,
    baseline_only: bool = False,
    phases: Iterable[Phase] = PHASES,
    deny: DenyList | None = None,
    out_dir: str | Path | None = None,
) -> list[dict[str, Any]]:
    """Every scenario x phase x repeat cell, in a fixed order."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    reports: list[dict[str, Any]] = []
    phases = list(phases)
    for scn in scenarios:
        gw = gateway_for(scn)
        for phase in phases:
            for rep in range(1, repeats + 1):
                try:
                    reports.extend(
                        evaluate_cell(scn, phase, rep, gw, config, deny, True, not baseline_only, out)
                    )
                except (PhaseNotPresent, WouldEmptyIncident) as exc:
                    log.warning("skipping %s/%s: %s", scn.scenario_id, phase.value, exc)
                    break
    return reports


def write_report(reports: Sequence[dict[str, Any]], out_dir: str | Path) -> dict[str, Any]:
    """Write ``report.json`` (metrics plus every run) and ``report.txt``; returns the metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = compute_metrics(reports)
    ordered = sorted(reports, key=lambda r: (r["variant"], r["scenario_id"], r["phase"], r["repeat"]))
    doc = {"metrics": metrics, "runs": ordered}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(render_report(metrics), encoding="utf-8")
    return metrics


def load_reports(run_dir: str | Path) -> list[dict[str, Any]]:
    """Run reports under ``run_dir/runs/<variant>/*.json``, or the ``runs`` list of a ``report.json``."""
    root = Path(run_dir)
    files = sorted((root / "runs").glob("*/*.json")) if (root / "runs").is_dir() else []
    if files:
        return [json.loads(p.read_text(encoding="utf-8")) for p in files]
    if (root / "report.json").is_file():
        return list(json.loads((root / "report.json").read_text(encoding="utf-8")).get("runs", []))
    return []

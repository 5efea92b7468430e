"""``threatgap`` command line: investigate, eval, report, scenario and audit.

Exit codes:
    0  success (including runs that found no gaps)
    1  job-level failure: at least one incident job failed after retries
    2  configuration or input error (bad config, unreadable inputs, no reports)
    3  the grounding audit found violations

Every nonzero exit writes one JSON error record to standard error, e.g.
``{"error": {"type": "ConfigError", "message": "...", "exit_code": 2}}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .alerting import emit
from .backends import RecordingBackend, RemoteBackend, ScriptedOracle
from .config import DenyList, RunConfig
from .errors import ConfigError, JobFailure, MissingReports, RecordError, ThreatGapError, UnknownTemplate
from .evaluation.analyst import ScriptedAnalyst
from .evaluation.audit import audit_run_dir
from .evaluation.metrics import compute_metrics, render_report
from .evaluation.protocol import hold_out, score_recovery
from .evaluation.runner import evaluate, evaluate_cell, load_reports, write_report
from .evaluation.scenarios import Scenario, cohort, resolve_scenario, write_bundle
from .gateway import Gateway, ModelBackend, get_price_profile
from .model import Phase, load_incidents
from .pipeline import IncidentRun, run_incident
from .store import TelemetryStore
from .timeline import BatchCriteria, Feeds, batch_incidents

log = logging.getLogger("threatgap")

EXIT_OK, EXIT_JOB_FAILURE, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2, 3

_PHASE_ALIASES = {p.short.lower(): p for p in Phase} | {p.value.lower(): p for p in Phase}


class AuditFailed(ThreatGapError):
    """The grounding audit found at least one violation."""


def _phase(text: str) -> Phase:
    try:
        return _PHASE_ALIASES[text.strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown phase {text!r}; use one of {', '.join(p.value for p in Phase)}"
        ) from None


# ---------------------------------------------------------------------------
# backends


def remote_backend(config: RunConfig) -> ModelBackend:
    """Chat-completions backend configured from THREATGAP_API_* environment variables."""
    return RemoteBackend.from_env(max_in_flight=config.concurrency)


def make_backend(spec: str, scenarios: Sequence[Scenario], config: RunConfig) -> ModelBackend:
    """``oracle`` (scripted analyst), ``oracle:<dir>`` (strict fixture replay) or ``remote``."""
    if spec == "oracle":
        return ScriptedOracle({}, fallback=ScriptedAnalyst(scenarios))
    if spec.startswith("oracle:"):
        directory = spec.split(":", 1)[1]
        try:
            return ScriptedOracle.from_dir(directory)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load oracle fixtures from {directory}: {exc}") from exc
    if spec == "remote":
        return remote_backend(config)
    raise ConfigError(f"unknown model backend {spec!r} (expected oracle, oracle:<dir> or remote)")


def _gateway(backend: ModelBackend, config: RunConfig) -> Gateway:
    try:
        prices = get_price_profile(config.price_profile)
    except KeyError as exc:
        raise ConfigError(f"unknown price profile {config.price_profile!r}") from exc
    return Gateway(backend, prices, max_workers=config.concurrency)


def _config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(
        args.config,
        backend=getattr(args, "model_backend", None),
        seed=getattr(args, "seed", None),
        out_dir=getattr(args, "out", None),
        concurrency=getattr(args, "concurrency", None),
        row_budget=getattr(args, "row_budget", None),
        max_frontier=getattr(args, "max_frontier", None),
        max_tasks_total=getattr(args, "max_tasks", None),
        deny_list=getattr(args, "deny_list", None),
        price_profile=getattr(args, "price_profile", None),
    )


def _emit_json(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# investigate


def _write_run(out: Path, run: IncidentRun, extra: dict[str, Any]) -> dict[str, Any]:
    d = out / run.incident_id
    d.mkdir(parents=True, exist_ok=True)
    sink = d / "alerts.jsonl"
    sink.unlink(missing_ok=True)
    sink.touch()
    emit(run.alerts, sink)
    (d / "transcript.json").write_text(json.dumps(run.transcript(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if run.timeline is not None:
        (d / "timeline.json").write_text(run.timeline.serialize() + "\n", encoding="utf-8")
    stats = {**run.stats(), **extra}
    (d / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats


def _incident_sources(args: argparse.Namespace, config: RunConfig):
    """Yield ``(incident, store, feeds, scenario_or_None)`` for the requested inputs."""
    if args.scenario:
        try:
            scn = resolve_scenario(args.scenario)
        except (UnknownTemplate, RecordError) as exc:
            raise ConfigError(f"cannot resolve scenario {args.scenario!r}: {exc}") from exc
        return [(scn.incident, scn.store(config.max_lookback_hours), scn.feeds(), scn)]
    if not (args.incidents and args.manifest):
        raise ConfigError("investigate needs --scenario, or both --incidents and --manifest")
    try:
        incidents = load_incidents(args.incidents)
        store = TelemetryStore(config.max_lookback_hours)
        store.load_manifest(args.manifest)
        feeds = Feeds.load(args.ueba, args.ti)
    except (OSError, ValueError, ThreatGapError) as exc:
        raise ConfigError(f"cannot read investigation inputs: {exc}") from exc
    batches = batch_incidents(incidents, BatchCriteria(config.min_priority))
    return [(inc, store, feeds, None) for batch in batches for inc in batch]


def cmd_investigate(args: argparse.Namespace) -> int:
    config = _config(args)
    out = config.ensure_out_dir()
    deny = DenyList.load(config.deny_list)
    sources = _incident_sources(args, config)
    scenarios = [s for *_, s in sources if s is not None]
    gateway = _gateway(make_backend(config.backend, scenarios, config), config)
    summaries = []
    failed = []
    for incident, store, feeds, scn in sources:
        spec = None
        if args.hold_out is not None:
            try:
                incident, spec = hold_out(incident, args.hold_out, scn.scenario_id if scn else None)
            except ThreatGapError as exc:
                raise ConfigError(str(exc)) from exc
        run = run_incident(incident, store, gateway.session(), feeds, config, deny)
        extra: dict[str, Any] = {}
        if spec is not None:
            extra["hold_out"] = spec.to_dict()
            if scn is not None:
                extra["recovery"] = score_recovery(run.alerts, spec, scn.ground_truth).to_dict()
        summaries.append(_write_run(out, run, extra))
        if run.failed:
            failed.append(run.incident_id)
    if args.format == "json":
        _emit_json({"out_dir": str(out), "incidents": summaries})
    else:
        for s in summaries:
            line = f"{s['incident_id']}: {s['status']}, {s['tasks']} tasks, {s['evidence']} evidence, {s['alerts']} alert(s)"
            if "recovery" in s:
                r = s["recovery"]
                line += f"; recovery tp={r['tp']} fp={r['fp']} fn={r['fn']}"
            print(line)
        print(f"outputs written to {out}")
    if failed:
        raise JobFailure(f"{len(failed)} job(s) failed: {', '.join(failed)}; partial transcripts kept in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / report / audit


def _load_cohort(spec: str) -> list[Scenario]:
    try:
        return [resolve_scenario(name) for name in cohort(spec)]
    except (UnknownTemplate, RecordError) as exc:
        raise ConfigError(f"cannot resolve cohort {spec!r}: {exc}") from exc


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    out = config.ensure_out_dir()
    deny = DenyList.load(config.deny_list)
    scenarios = _load_cohort(args.cohort)
    if not scenarios:
        raise ConfigError("the cohort is empty")
    gateway = _gateway(make_backend(config.backend, scenarios, config), config)
    reports = evaluate(
        scenarios, lambda _s: gateway, config, repeats=args.repeats,
        baseline_only=args.baseline_only, deny=deny, out_dir=out,
    )
    metrics = write_report(reports, out)
    if args.format == "json":
        _emit_json(metrics)
    else:
        sys.stdout.write(render_report(metrics))
    failed = sum(1 for r in reports if r["status"] != "ok")
    if failed:
        raise JobFailure(f"{failed} of {len(reports)} evaluation job(s) failed")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    reports = load_reports(run_dir) if run_dir.is_dir() else []
    if not reports:
        raise MissingReports(f"no run reports under {run_dir}")
    metrics = compute_metrics(reports)
    if args.format == "json":
        _emit_json(metrics)
    else:
        sys.stdout.write(render_report(metrics))
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    result = audit_run_dir(args.run_dir)
    if result.files_checked == 0:
        raise MissingReports(f"no alert files under {args.run_dir}/alerts")
    if args.format == "json":
        _emit_json(result.to_dict())
    else:
        print(f"checked {result.alerts_checked} alert(s) in {result.files_checked} file(s): "
              f"{len(result.violations)} violation(s)")
        for v in result.violations:
            print(f"  {v['file']} {v['alert_id']}: {v['reason']}")
    if not result.ok:
        raise AuditFailed(f"{len(result.violations)} grounding violation(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scenario bundles


def record_fixtures(scenario: Scenario, directory: str | Path, config: RunConfig | None = None) -> Path:
    """Record scripted-analyst answers for every run the CLI and eval make on ``scenario``."""
    config = config or RunConfig()
    recorder = RecordingBackend(ScriptedOracle({}, fallback=ScriptedAnalyst([scenario])))
    gateway = Gateway(recorder, get_price_profile(config.price_profile), max_workers=1)
    run_incident(scenario.incident, scenario.store(config.max_lookback_hours), gateway.session(),
                 scenario.feeds(), config)
    for phase in Phase:
        try:
            evaluate_cell(scenario, phase, 1, gateway, config)
        except ThreatGapError as exc:
            log.info("no fixtures for %s/%s: %s", scenario.scenario_id, phase.value, exc)
    return recorder.write(directory)


def cmd_scenario(args: argparse.Namespace) -> int:
    try:
        scn = resolve_scenario(args.name)
    except (UnknownTemplate, RecordError) as exc:
        raise ConfigError(f"cannot resolve scenario {args.name!r}: {exc}") from exc
    problems = scn.validate()
    if problems:
        raise ConfigError(f"scenario {scn.scenario_id} is inconsistent: {problems[:3]}")
    out = Path(args.out or scn.scenario_id)
    try:
        write_bundle(scn, out)
        fixtures = None
        if args.record_fixtures:
            fixtures = record_fixtures(scn, args.fixtures_dir or out / "fixtures")
    except OSError as exc:
        raise ConfigError(f"cannot write bundle to {out}: {exc}") from exc
    info = {"scenario_id": scn.scenario_id, "bundle": str(out), "fixtures": str(fixtures) if fixtures else None,
            "stages": len(scn.ground_truth), "alerts": len(scn.incident.alerts),
            "rows": sum(len(r) for r in scn.tables.values())}
    if args.format == "json":
        _emit_json(info)
    else:
        print(f"{info['scenario_id']}: {info['rows']} rows, {info['stages']} stages, {info['alerts']} alerts -> {out}")
        if fixtures:
            print(f"fixtures recorded in {fixtures}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, run: bool = True) -> None:
    p.add_argument("--format", choices=("table", "json"), default="table", help="output format (default: table)")
    if not run:
        return
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model-backend", dest="model_backend",
                   help="oracle (scripted analyst), oracle:<dir> (replay recorded fixtures only) or remote "
                        "(THREATGAP_API_BASE, THREATGAP_API_KEY, THREATGAP_MODEL)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("--concurrency", type=int, help="global limit on concurrent model calls")
    p.add_argument("--row-budget", dest="row_budget", type=int, help="per-table row budget for aggregation")
    p.add_argument("--max-frontier", dest="max_frontier", type=int, help="max entities pivoted on in round 2")
    p.add_argument("--max-tasks", dest="max_tasks", type=int, help="override the priority-derived task budget")
    p.add_argument("--deny-list", dest="deny_list", help="JSON deny-list of low-signal entities")
    p.add_argument("--price-profile", dest="price_profile", help="token price profile name")


class _Parser(argparse.ArgumentParser):
    """Usage errors also leave a machine-readable record on stderr."""

    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        _error_record(ConfigError(f"{self.prog}: {message}"), EXIT_CONFIG)
        self.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="threatgap",
        description="Find attack-story gaps in security incidents and emit grounded alerts.",
        epilog="Exit codes: 0 ok, 1 job failure, 2 config/input error, 3 audit violations.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("investigate", help="investigate incidents and emit dynamic alerts")
    src = p.add_argument_group("inputs")
    src.add_argument("--scenario", help="scenario name (e.g. ransomware-01) or bundle directory")
    src.add_argument("--incidents", help="JSONL file of incidents")
    src.add_argument("--manifest", help="telemetry manifest JSON")
    src.add_argument("--ueba", help="UEBA feed JSONL")
    src.add_argument("--ti", help="threat-intelligence feed JSONL")
    p.add_argument("--hold-out", dest="hold_out", type=_phase,
                   help="remove the incident's alerts of this phase before investigating")
    _common(p)
    p.set_defaults(func=cmd_investigate)

    p = sub.add_parser("eval", help="run the held-out gap-recovery evaluation")
    p.add_argument("--cohort", default="default",
                   help="'default' or a comma-separated list of scenario names / bundle directories")
    p.add_argument("--repeats", type=int, default=3, help="repeats per scenario and phase (default 3)")
    p.add_argument("--baseline-only", dest="baseline_only", action="store_true", help="run only the row-only baseline")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables from an evaluation run directory")
    p.add_argument("run_dir")
    _common(p, run=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="check every emitted alert in a run directory is grounded")
    p.add_argument("run_dir")
    _common(p, run=False)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("scenario", help="write a synthetic scenario bundle, optionally with oracle fixtures")
    p.add_argument("name", help="scenario name, e.g. ransomware-01")
    p.add_argument("--out", help="bundle directory (default: the scenario name)")
    p.add_argument("--record-fixtures", dest="record_fixtures", action="store_true",
                   help="record scripted-analyst answers for replay with --model-backend oracle:<dir>")
    p.add_argument("--fixtures-dir", dest="fixtures_dir", help="where to write fixtures (default: <out>/fixtures)")
    _common(p, run=False)
    p.set_defaults(func=cmd_scenario)
    return parser


_EXIT_FOR: tuple[tuple[type[BaseException], int], ...] = (
    (JobFailure, EXIT_JOB_FAILURE),
    (AuditFailed, EXIT_AUDIT),
    (ConfigError, EXIT_CONFIG),
    (MissingReports, EXIT_CONFIG),
)


def _error_record(exc: BaseException, code: int) -> None:
    sys.stderr.write(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "repeats", 1) < 1:
        _error_record(ConfigError("--repeats must be >= 1"), EXIT_CONFIG)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ThreatGapError as exc:
        for kind, code in _EXIT_FOR:
            if isinstance(exc, kind):
                break
        else:
            code = EXIT_CONFIG
        _error_record(exc, code)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Standalone grounding audit over emitted alert files and their timelines.

This checker deliberately works on the serialized JSON only and re-derives
every rule itself, so it does not share code paths with the in-pipeline
alert gate it is auditing.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..model import attack_catalog

_TECH = re.compile(r"^T\d{4}(\.\d{3})?$")


@dataclass
class AuditResult:
    alerts_checked: int = 0
    files_checked: int = 0
    violations: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "alerts_checked": self.alerts_checked,
            "files_checked": self.files_checked,
            "violations": list(self.violations),
        }


def _ent(d: Mapping[str, str]) -> tuple[str, str]:
    return (d["kind"], d["value"])


def _known(technique: str, catalog: Mapping[str, Any]) -> bool:
    return bool(_TECH.match(technique)) and (technique in catalog or technique.split(".")[0] in catalog)


def audit_alert(
    alert: Mapping[str, Any], timeline: Mapping[str, Any], incident: Mapping[str, Any]
) -> list[str]:
    """Reasons this alert is not grounded; empty when it is."""
    catalog = attack_catalog()
    problems = []
    rows = {r["row_id"]: r for r in timeline["rows"]}
    tl_entities = {_ent(e) for r in timeline["rows"] for e in r["pivot_entities"] + r["related_entities"]}
    inc_entities = {_ent(e) for a in incident["alerts"] for e in a["entities"]}
    inc_techniques = {t for a in incident["alerts"] for t in a["techniques"]}
    ents = {_ent(e) for e in alert["implicated_entities"]}
    techs = set(alert["mitre_techniques"])
    if not ents:
        problems.append("no implicated entities")
    if not techs:
        problems.append("no techniques")
    if not alert["evidence_row_ids"]:
        problems.append("no evidence rows")
    for kind, value in sorted(ents - tl_entities):
        problems.append(f"entity {kind}:{value} does not resolve in the timeline")
    for t in sorted(techs):
        if not _known(t, catalog):
            problems.append(f"technique {t} does not resolve in the ATT&CK mapping")
    for rid in alert["evidence_row_ids"]:
        row = rows.get(rid)
        if row is None:
            problems.append(f"evidence row {rid} does not resolve in the timeline")
        elif row["is_alert_row"]:
            problems.append(f"evidence row {rid} is an existing alert")
    if techs <= inc_techniques and ents <= inc_entities:
        problems.append("alert introduces no technique or entity absent from the incident")
    if alert["incident_id"] != incident["incident_id"]:
        problems.append("alert belongs to a different incident")
    return problems


def _read_jsonl(path: Path) -> Iterable[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def audit_files(alert_file: str | Path, timeline_file: str | Path, incident_file: str | Path) -> AuditResult:
    result = AuditResult(files_checked=1)
    timeline = json.loads(Path(timeline_file).read_text(encoding="utf-8"))
    incident = json.loads(Path(incident_file).read_text(encoding="utf-8"))
    for alert in _read_jsonl(Path(alert_file)):
        result.alerts_checked += 1
        for reason in audit_alert(alert, timeline, incident):
            result.violations.append({"file": str(alert_file), "alert_id": alert.get("alert_id"), "reason": reason})
    return result


def audit_run_dir(run_dir: str | Path) -> AuditResult:
    """Audit every ``alerts/<variant>/<stem>.jsonl`` against ``timelines/<stem>.json``."""
    root = Path(run_dir)
    total = AuditResult()
    for alert_file in sorted((root / "alerts").glob("*/*.jsonl")):
        stem = alert_file.stem
        tl = root / "timelines" / f"{stem}.json"
        inc = root / "incidents" / f"{stem}.json"
        if not tl.is_file() or not inc.is_file():
            total.files_checked += 1
            total.violations.append({"file": str(alert_file), "alert_id": None, "reason": "timeline or incident missing"})
            continue
        r = audit_files(alert_file, tl, inc)
        total.files_checked += r.files_checked
        total.alerts_checked += r.alerts_checked
        total.violations.extend(r.violations)
    return total

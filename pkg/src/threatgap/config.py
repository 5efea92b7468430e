"""Run configuration and the low-signal entity deny-list."""

from __future__ import annotations

import ipaddress
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .model import Entity, EntityKind

DEFAULT_ROW_BUDGET = 1000
DEFAULT_MAX_LEVELS = 3
DEFAULT_MAX_FRONTIER = 10
DEFAULT_EVIDENCE_BATCH = 25


@dataclass(frozen=True)
class RunConfig:
    backend: str = "oracle"
    price_profile: str = "default"
    row_budget: int = DEFAULT_ROW_BUDGET
    max_levels: int = DEFAULT_MAX_LEVELS
    max_frontier: int = DEFAULT_MAX_FRONTIER
    max_tasks_total: int | None = None
    max_lookback_hours: int = 720
    row_cap: int = 20_000
    evidence_batch: int = DEFAULT_EVIDENCE_BATCH
    min_priority: float = 0.0
    deny_list: str | None = None
    out_dir: str = "runs"
    concurrency: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("row_budget", "max_levels", "max_frontier", "max_lookback_hours",
                     "row_cap", "evidence_batch", "concurrency"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.max_tasks_total is not None and (
            not isinstance(self.max_tasks_total, int) or self.max_tasks_total <= 0
        ):
            raise ConfigError(f"max_tasks_total must be a positive integer, got {self.max_tasks_total!r}")
        if not 0.0 <= float(self.min_priority) <= 1.0:
            raise ConfigError("min_priority must lie in [0, 1]")
        if self.evidence_batch > 25:
            raise ConfigError("evidence_batch is capped at 25 rows per filter call")

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides: Any) -> "RunConfig":
        """Read a JSON config file, then apply non-None ``overrides`` (flags win)."""
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def with_overrides(self, **kw: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def ensure_out_dir(self) -> Path:
        out = Path(self.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DenyList:
    """Entities too common to be worth pivoting on (resolvers, platform IPs, OS binaries)."""

    networks: tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, ...] = ()
    domain_suffixes: tuple[str, ...] = ()
    values: Mapping[EntityKind, frozenset[str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DenyList":
        try:
            nets = tuple(ipaddress.ip_network(n) for n in d.get("ip_networks", ()))
            values = {
                EntityKind(k): frozenset(v.strip().casefold() for v in vs)
                for k, vs in d.get("values", {}).items()
            }
        except ValueError as exc:
            raise ConfigError(f"bad deny-list: {exc}") from exc
        suffixes = tuple(s.strip().casefold().lstrip(".") for s in d.get("domain_suffixes", ()))
        return cls(nets, suffixes, values)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "DenyList":
        if path is None:
            return default_deny_list()
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read deny-list {path}: {exc}") from exc

    def is_low_signal(self, entity: Entity) -> bool:
        if entity.value in self.values.get(entity.kind, ()):
            return True
        if entity.kind is EntityKind.IP:
            addr = ipaddress.ip_address(entity.value)
            return any(addr in n for n in self.networks if n.version == addr.version)
        if entity.kind in (EntityKind.URL, EntityKind.EMAIL):
            host = _host_of(entity)
            return any(host == s or host.endswith("." + s) for s in self.domain_suffixes)
        return False


def _host_of(entity: Entity) -> str:
    v = entity.value
    if entity.kind is EntityKind.EMAIL:
        return v.rpartition("@")[2]
    v = v.split("://", 1)[-1]
    return v.split("/", 1)[0].split(":", 1)[0]


@lru_cache(maxsize=1)
def default_deny_list() -> DenyList:
    text = resources.files("threatgap.data").joinpath("denylist.json").read_text("utf-8")
    return DenyList.from_dict(json.loads(text))

"""Versioned prompt contracts executed against a pluggable model backend.

A contract pins the input schema, the output schema (including allowed-value
enumerations) and a list of declarative grounding rules.  ``execute_contract``
renders the prompt, calls the backend, and validates every attempt; outputs
that stay invalid after ``max_retries`` are suppressed, never returned.

Grounding rule kinds:

``member``
    every value at ``output`` must appear among the values at ``input``.
``max_count``
    the number of values at ``output`` (one path or several) is at most the
    integer at ``input``.
``max_value``
    every number at ``output`` is at most the integer at ``input``.
``non_increasing_len``
    the lists at ``output`` never grow from one element to the next.

Paths are dotted field names; a ``[]`` suffix fans out over a list, e.g.
``tasks[].entity_scope[]``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, TypeVar

from jsonschema import Draft202012Validator

from .errors import BackendFailure, ContractDefinitionError, InputSchemaViolation
from .model import canonical_json

log = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 3
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
RULE_KINDS = ("member", "max_count", "max_value", "non_increasing_len")

T = TypeVar("T")
R = TypeVar("R")


# ---------------------------------------------------------------------------
# contracts


@dataclass(frozen=True)
class GroundingRule:
    kind: str
    output: tuple[str, ...]
    input: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GroundingRule":
        out = d["output"]
        return cls(d["kind"], tuple(out) if isinstance(out, list) else (out,), d.get("input"))

    def describe(self) -> str:
        tgt = "+".join(self.output)
        return f"{self.kind}({tgt}" + (f" <= {self.input})" if self.input else ")")


@dataclass(frozen=True, eq=False)
class PromptContract:
    contract_id: str
    version: str
    input_schema: Mapping[str, Any]
    output_schema: Mapping[str, Any]
    grounding_rules: tuple[GroundingRule, ...]
    template: str
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self) -> None:
        if not re.fullmatch(r"\d+\.\d+\.\d+", self.version):
            raise ContractDefinitionError(f"{self.contract_id}: version {self.version!r} is not semver")
        if self.max_retries < 0:
            raise ContractDefinitionError(f"{self.contract_id}: negative max_retries")
        props = self.input_schema.get("properties", {})
        for name in _PLACEHOLDER.findall(self.template):
            if name not in props:
                raise ContractDefinitionError(
                    f"{self.contract_id}: template placeholder {{{name}}} not in input schema"
                )
        for rule in self.grounding_rules:
            if rule.kind not in RULE_KINDS:
                raise ContractDefinitionError(f"{self.contract_id}: unknown rule kind {rule.kind}")
            for p in rule.output:
                if not _schema_has_path(self.output_schema, p):
                    raise ContractDefinitionError(f"{self.contract_id}: rule output path {p!r} not in output schema")
            if rule.kind != "non_increasing_len":
                if rule.input is None or not _schema_has_path(self.input_schema, rule.input):
                    raise ContractDefinitionError(f"{self.contract_id}: rule input path {rule.input!r} not in input schema")
        Draft202012Validator.check_schema(self.input_schema)
        Draft202012Validator.check_schema(self.output_schema)
        object.__setattr__(self, "_in_validator", Draft202012Validator(self.input_schema))
        object.__setattr__(self, "_out_validator", Draft202012Validator(self.output_schema))

    @property
    def key(self) -> str:
        return f"{self.contract_id}@{self.version}"

    def render(self, payload: Mapping[str, Any]) -> str:
        def sub(m: re.Match) -> str:
            v = payload.get(m.group(1))
            return v if isinstance(v, str) else canonical_json(v)

        return _PLACEHOLDER.sub(sub, self.template)

    def input_errors(self, payload: Any) -> list[str]:
        errs = sorted(self._in_validator.iter_errors(payload), key=_error_sort_key)
        return [f"{_json_path(e.absolute_path)}: {e.message}" for e in errs]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PromptContract":
        try:
            return cls(
                contract_id=d["contract_id"],
                version=d["version"],
                input_schema=d["input_schema"],
                output_schema=d["output_schema"],
                grounding_rules=tuple(GroundingRule.from_dict(r) for r in d.get("grounding_rules", ())),
                template=d["template"],
                max_retries=int(d.get("max_retries", DEFAULT_MAX_RETRIES)),
            )
        except KeyError as exc:
            raise ContractDefinitionError(f"contract definition missing {exc}") from exc


def _schema_has_path(schema: Mapping[str, Any], path: str) -> bool:
    node: Any = schema
    for seg in path.split("."):
        name, fans = _split_segment(seg)
        props = node.get("properties", {}) if isinstance(node, Mapping) else {}
        if name not in props:
            return False
        node = props[name]
        for _ in range(fans):
            if not isinstance(node, Mapping) or "items" not in node:
                return False
            node = node["items"]
    return True


def _split_segment(seg: str) -> tuple[str, int]:
    fans = 0
    while seg.endswith("[]"):
        seg = seg[:-2]
        fans += 1
    return seg, fans


def resolve_path(obj: Any, path: str) -> list[Any]:
    """Collect every value reached by ``path``; missing branches contribute nothing."""
    current = [obj]
    for seg in path.split("."):
        name, fans = _split_segment(seg)
        nxt = []
        for node in current:
            if isinstance(node, Mapping) and name in node:
                nxt.append(node[name])
        for _ in range(fans):
            nxt = [x for node in nxt if isinstance(node, list) for x in node]
        current = nxt
    return current


@lru_cache(maxsize=None)
def load_contract(contract_id: str, directory: str | None = None) -> PromptContract:
    """Load a contract definition shipped in ``threatgap/data/contracts``."""
    if directory is None:
        text = resources.files("threatgap.data.contracts").joinpath(f"{contract_id}.json").read_text("utf-8")
    else:
        text = (Path(directory) / f"{contract_id}.json").read_text("utf-8")
    return PromptContract.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    path: str
    message: str
    attempt: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"attempt": self.attempt, "path": self.path, "message": self.message}


def _json_path(parts: Iterable[Any]) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _error_sort_key(e) -> tuple:
    return (tuple(str(p) for p in e.absolute_path), e.validator, e.message)


def _values_key(v: Any) -> str:
    return canonical_json(v)


def validate_output(contract: PromptContract, payload: Mapping[str, Any], candidate: Any) -> list[Violation]:
    """Schema, allowed-value and grounding checks; an empty list means accepted.

    Grounding rules are only evaluated once the candidate is schema-valid, so a
    malformed object yields schema violations alone.
    """
    errs = sorted(contract._out_validator.iter_errors(candidate), key=_error_sort_key)
    if errs:
        return [Violation(_json_path(e.absolute_path), e.message) for e in errs]
    out: list[Violation] = []
    for rule in contract.grounding_rules:
        out.extend(_check_rule(rule, payload, candidate))
    return out


def _check_rule(rule: GroundingRule, payload: Mapping[str, Any], candidate: Any) -> list[Violation]:
    name = rule.describe()
    if rule.kind == "member":
        allowed = {_values_key(v) for v in resolve_path(payload, rule.input)}
        bad = []
        for v in resolve_path(candidate, rule.output[0]):
            if _values_key(v) not in allowed:
                bad.append(v)
        return [
            Violation(rule.output[0], f"{name}: {_values_key(v)} is not grounded in {rule.input}")
            for v in bad
        ]
    if rule.kind == "max_count":
        limit = _limit(payload, rule.input)
        n = sum(len(resolve_path(candidate, p)) for p in rule.output)
        if n > limit:
            return [Violation("+".join(rule.output), f"{name}: {n} items exceed limit {limit}")]
        return []
    if rule.kind == "max_value":
        limit = _limit(payload, rule.input)
        return [
            Violation(rule.output[0], f"{name}: {v} exceeds limit {limit}")
            for v in resolve_path(candidate, rule.output[0])
            if isinstance(v, (int, float)) and v > limit
        ]
    # non_increasing_len
    seqs = resolve_path(candidate, rule.output[0])
    for i in range(1, len(seqs)):
        if len(seqs[i]) > len(seqs[i - 1]):
            return [Violation(rule.output[0], f"{name}: element {i} is longer than element {i - 1}")]
    return []


def _limit(payload: Mapping[str, Any], path: str) -> float:
    vals = resolve_path(payload, path)
    if len(vals) != 1 or not isinstance(vals[0], (int, float)):
        raise InputSchemaViolation(f"limit path {path} must resolve to one number")
    return vals[0]


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class PriceProfile:
    name: str
    input_per_1k: float
    output_per_1k: float

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return prompt_tokens * self.input_per_1k / 1000.0 + completion_tokens * self.output_per_1k / 1000.0


@lru_cache(maxsize=None)
def price_profiles(path: str | None = None) -> dict[str, PriceProfile]:
    if path is None:
        text = resources.files("threatgap.data").joinpath("prices.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    doc = json.loads(text)
    return {
        name: PriceProfile(name, float(p["input_per_1k"]), float(p["output_per_1k"]))
        for name, p in doc["profiles"].items()
    }


def get_price_profile(name: str = "default", path: str | None = None) -> PriceProfile:
    profiles = price_profiles(path)
    if name not in profiles:
        raise KeyError(f"unknown price profile {name!r}; have {sorted(profiles)}")
    return profiles[name]


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_usd: float = 0.0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.cost_usd + other.cost_usd,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "cost_usd": self.cost_usd,
        }


class OutcomeStatus(str, Enum):
    VALID = "Valid"
    SUPPRESSED = "SuppressedAfterRetries"
    BACKEND_FAILURE = "BackendFailure"


@dataclass(frozen=True)
class ContractOutcome:
    contract_id: str
    status: OutcomeStatus
    output: Any
    attempts: int
    violations: tuple[Violation, ...]
    usage: TokenUsage
    input_digest: str = ""
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.status is OutcomeStatus.VALID) != (self.output is not None):
            raise ValueError("output must be present exactly when the outcome is Valid")

    @property
    def ok(self) -> bool:
        return self.status is OutcomeStatus.VALID

    @property
    def invalid_attempts(self) -> int:
        return len({v.attempt for v in self.violations})

    def to_dict(self) -> dict[str, Any]:
        return {
            "contract_id": self.contract_id,
            "status": self.status.value,
            "attempts": self.attempts,
            "violations": [v.to_dict() for v in self.violations],
            "usage": self.usage.to_dict(),
            "input_digest": self.input_digest,
            "error": self.error,
        }


def usage_report(outcomes: Sequence[ContractOutcome]) -> dict[str, Any]:
    """Total and per-contract cost plus the share of attempts that failed validation."""
    total = 0.0
    per: dict[str, float] = {}
    attempts = 0
    invalid = 0
    prompt = completion = 0
    for o in outcomes:
        total += o.usage.cost_usd
        per[o.contract_id] = per.get(o.contract_id, 0.0) + o.usage.cost_usd
        attempts += o.attempts
        invalid += o.invalid_attempts
        prompt += o.usage.prompt_tokens
        completion += o.usage.completion_tokens
    return {
        "total_cost_usd": total,
        "per_contract_cost_usd": dict(sorted(per.items())),
        "invalid_response_rate": invalid / attempts if attempts else 0.0,
        "attempts": attempts,
        "invalid_attempts": invalid,
        "prompt_tokens": prompt,
        "completion_tokens": completion,
        "calls": len(outcomes),
        "suppressed": sum(1 for o in outcomes if o.status is OutcomeStatus.SUPPRESSED),
        "backend_failures": sum(1 for o in outcomes if o.status is OutcomeStatus.BACKEND_FAILURE),
    }


# ---------------------------------------------------------------------------
# backends and execution


@dataclass(frozen=True)
class CompletionRequest:
    contract_id: str
    version: str
    input_digest: str
    attempt: int
    prompt: str
    output_schema: Mapping[str, Any]
    payload: Mapping[str, Any]


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int
    completion_tokens: int


class ModelBackend(Protocol):
    def complete(self, request: CompletionRequest) -> Completion: ...


def input_digest(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _feedback_suffix(violations: Sequence[Violation]) -> str:
    lines = "\n".join(f"- {v.path}: {v.message}" for v in violations[:10])
    return f"\n\nYour previous answer was rejected:\n{lines}\nReturn a corrected JSON object."


def execute_contract(
    contract: PromptContract,
    payload: Mapping[str, Any],
    backend: ModelBackend,
    prices: PriceProfile | None = None,
    feedback: bool = True,
) -> ContractOutcome:
    errors = contract.input_errors(payload)
    if errors:
        raise InputSchemaViolation(f"{contract.contract_id}: " + "; ".join(errors[:5]))
    prices = prices or get_price_profile()
    digest = input_digest(payload)
    base_prompt = contract.render(payload)
    usage = TokenUsage()
    violations: list[Violation] = []
    last: list[Violation] = []
    attempt = 0
    for attempt in range(1, contract.max_retries + 2):
        prompt = base_prompt + (_feedback_suffix(last) if feedback and last else "")
        request = CompletionRequest(
            contract.contract_id, contract.version, digest, attempt, prompt, contract.output_schema, payload
        )
        try:
            resp = backend.complete(request)
        except BackendFailure as exc:
            log.warning("%s: backend failure on attempt %d: %s", contract.contract_id, attempt, exc)
            return ContractOutcome(
                contract.contract_id, OutcomeStatus.BACKEND_FAILURE, None, attempt,
                tuple(violations), usage, digest, str(exc),
            )
        usage = usage + TokenUsage(
            resp.prompt_tokens, resp.completion_tokens, prices.cost(resp.prompt_tokens, resp.completion_tokens)
        )
        try:
            candidate = json.loads(resp.text)
        except (json.JSONDecodeError, TypeError) as exc:
            last = [Violation("$", f"malformed JSON: {exc}", attempt)]
        else:
            last = [replace(v, attempt=attempt) for v in validate_output(contract, payload, candidate)]
            if not last:
                return ContractOutcome(
                    contract.contract_id, OutcomeStatus.VALID, candidate, attempt,
                    tuple(violations), usage, digest,
                )
        violations.extend(last)
    log.info("%s: suppressed after %d attempts", contract.contract_id, attempt)
    return ContractOutcome(
        contract.contract_id, OutcomeStatus.SUPPRESSED, None, attempt, tuple(violations), usage, digest
    )


class Gateway:
    """Backend + prices + concurrency limit; shared by every job of a run."""

    def __init__(
        self,
        backend: ModelBackend,
        prices: PriceProfile | None = None,
        max_workers: int = 1,
        feedback: bool = True,
        contract_dir: str | None = None,
    ):
        self.backend = backend
        self.prices = prices or get_price_profile()
        self.max_workers = max(1, int(max_workers))
        self.feedback = feedback
        self.contract_dir = contract_dir

    def contract(self, contract_id: str) -> PromptContract:
        return load_contract(contract_id, self.contract_dir)

    def session(self) -> "Session":
        return Session(self)


class Session:
    """Per-job view of a gateway that keeps that job's contract outcomes.

    Outcomes from different jobs never share a list; run-level accounting
    merges the per-job lists afterwards.
    """

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self._outcomes: list[ContractOutcome] = []
        self._lock = threading.Lock()

    def run(self, contract_id: str, payload: Mapping[str, Any]) -> ContractOutcome:
        g = self.gateway
        outcome = execute_contract(g.contract(contract_id), payload, g.backend, g.prices, g.feedback)
        with self._lock:
            self._outcomes.append(outcome)
        return outcome

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` to each item under the gateway's concurrency limit, order preserved."""
        items = list(items)
        if self.gateway.max_workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(self.gateway.max_workers, len(items))) as pool:
            return list(pool.map(fn, items))

    @property
    def outcomes(self) -> list[ContractOutcome]:
        with self._lock:
            return sorted(self._outcomes, key=lambda o: (o.contract_id, o.input_digest, o.attempts, o.status.value))

    def calls_for(self, contract_id: str) -> int:
        return sum(1 for o in self.outcomes if o.contract_id == contract_id)

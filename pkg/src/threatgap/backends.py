"""Model backends: scripted oracle, recorder, fault injector and remote HTTP client."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

from .errors import BackendFailure, FixtureMissing
from .gateway import Completion, CompletionRequest, ModelBackend
from .model import canonical_json

log = logging.getLogger(__name__)


def estimate_tokens(text: str) -> int:
    """Rough token count for offline backends (four characters per token)."""
    return max(1, math.ceil(len(text) / 4))


def _as_text(response: Any) -> str:
    return response if isinstance(response, str) else canonical_json(response)


class ScriptedOracle:
    """Deterministic backend answering from ``(contract_id, input digest)`` fixtures.

    A fixture maps to a list of responses indexed by attempt; the last entry
    repeats once the list runs out.  String entries are returned verbatim (so
    fixtures can hold malformed text); anything else is serialized as JSON.

    ``fallback``, when given, answers requests with no fixture.  It receives
    the request and returns a response object.  Without one, a missing fixture
    is a backend failure.
    """

    def __init__(
        self,
        fixtures: Mapping[tuple[str, str], list[Any]] | None = None,
        fallback: Callable[[CompletionRequest], Any] | None = None,
    ):
        self.fixtures: dict[tuple[str, str], list[Any]] = {k: list(v) for k, v in (fixtures or {}).items()}
        self.fallback = fallback

    @classmethod
    def from_dir(cls, directory: str | Path, fallback=None) -> "ScriptedOracle":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"fixture directory {directory} does not exist")
        fixtures: dict[tuple[str, str], list[Any]] = {}
        for path in sorted(directory.glob("*.jsonl")):
            contract_id = path.stem
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        fixtures[(contract_id, rec["digest"])] = rec["responses"]
        return cls(fixtures, fallback)

    def complete(self, request: CompletionRequest) -> Completion:
        responses = self.fixtures.get((request.contract_id, request.input_digest))
        if responses:
            text = _as_text(responses[min(request.attempt, len(responses)) - 1])
        elif self.fallback is not None:
            text = _as_text(self.fallback(request))
        else:
            raise FixtureMissing(f"no fixture for {request.contract_id} digest {request.input_digest[:12]}")
        return Completion(text, estimate_tokens(request.prompt), estimate_tokens(text))


class CallableBackend:
    """Wraps a plain function ``request -> response object`` as a backend."""

    def __init__(self, fn: Callable[[CompletionRequest], Any]):
        self.fn = fn

    def complete(self, request: CompletionRequest) -> Completion:
        text = _as_text(self.fn(request))
        return Completion(text, estimate_tokens(request.prompt), estimate_tokens(text))


class RecordingBackend:
    """Forwards to ``inner`` and keeps every answer so it can be replayed as fixtures."""

    def __init__(self, inner: ModelBackend):
        self.inner = inner
        self._lock = threading.Lock()
        self._records: dict[tuple[str, str], dict[int, str]] = defaultdict(dict)

    def complete(self, request: CompletionRequest) -> Completion:
        resp = self.inner.complete(request)
        with self._lock:
            self._records[(request.contract_id, request.input_digest)][request.attempt] = resp.text
        return resp

    def fixtures(self) -> dict[tuple[str, str], list[Any]]:
        out = {}
        for key, by_attempt in self._records.items():
            texts = [by_attempt[a] for a in sorted(by_attempt)]
            out[key] = [_maybe_json(t) for t in texts]
        return out

    def write(self, directory: str | Path) -> Path:
        """Merge recorded responses into ``directory/<contract_id>.jsonl`` files."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        existing = ScriptedOracle.from_dir(directory).fixtures if any(directory.glob("*.jsonl")) else {}
        existing.update(self.fixtures())
        by_contract: dict[str, list[tuple[str, list[Any]]]] = defaultdict(list)
        for (cid, digest), responses in existing.items():
            by_contract[cid].append((digest, responses))
        for cid, entries in by_contract.items():
            with open(directory / f"{cid}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for digest, responses in sorted(entries):
                    fh.write(canonical_json({"digest": digest, "responses": responses}) + "\n")
        return directory


def _maybe_json(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


_INVALID_PAYLOADS = (
    "this is not json {",
    {},
    {"unexpected": True},
    [],
)


class FaultInjectingBackend:
    """Returns invalid output for selected contracts, otherwise defers to ``inner``.

    ``rate`` is the share of requests at a faulty site that get corrupted; the
    choice is a pure function of (seed, contract, digest, attempt), so the
    backend stays stateless and reproducible.
    """

    def __init__(self, inner: ModelBackend, sites: set[str] | frozenset[str], rate: float = 1.0, seed: int = 0):
        self.inner = inner
        self.sites = frozenset(sites)
        self.rate = rate
        self.seed = seed

    def _corrupt(self, request: CompletionRequest) -> bool:
        if request.contract_id not in self.sites:
            return False
        if self.rate >= 1.0:
            return True
        import hashlib

        h = hashlib.sha256(f"{self.seed}|{request.contract_id}|{request.input_digest}|{request.attempt}".encode())
        return int.from_bytes(h.digest()[:8], "big") / 2**64 < self.rate

    def complete(self, request: CompletionRequest) -> Completion:
        if not self._corrupt(request):
            return self.inner.complete(request)
        bad = _INVALID_PAYLOADS[(request.attempt - 1) % len(_INVALID_PAYLOADS)]
        text = _as_text(bad)
        return Completion(text, estimate_tokens(request.prompt), estimate_tokens(text))


class RemoteBackend:
    """Chat-completions-compatible HTTP backend using structured-output mode.

    Transport errors, HTTP 429 and 5xx responses are retried with exponential
    backoff up to ``transport_retries`` extra tries; after that the call fails
    with ``BackendFailure``.  At most ``max_in_flight`` requests run at once.
    """

    SYSTEM_PROMPT = (
        "You are a security investigation component. Answer with a single JSON object "
        "that satisfies the provided schema. Use only entities, rows and values present "
        "in the input."
    )

    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        model: str,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        transport_retries: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.transport_retries = transport_retries
        self.backoff = backoff
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(max(1, max_in_flight))
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> "RemoteBackend":
        env = os.environ if env is None else env
        base = env.get("THREATGAP_API_BASE")
        if not base:
            raise BackendFailure("THREATGAP_API_BASE is not set")
        key_var = env.get("THREATGAP_API_KEY_ENV", "THREATGAP_API_KEY")
        return cls(base, env.get(key_var), env.get("THREATGAP_MODEL", "gpt-4.1"), **kwargs)

    def request_body(self, request: CompletionRequest) -> dict[str, Any]:
        return {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": self.SYSTEM_PROMPT},
                {"role": "user", "content": request.prompt},
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": request.contract_id,
                    "schema": request.output_schema,
                    "strict": False,
                },
            },
        }

    def complete(self, request: CompletionRequest) -> Completion:
        body = self.request_body(request)
        url = f"{self.base_url}/chat/completions"
        last_error = "no attempt made"
        with self._sem:
            for i in range(self.transport_retries + 1):
                if i:
                    self._sleep(self.backoff * 2 ** (i - 1))
                try:
                    resp = self._client.post(url, json=body, headers=self._headers)
                except httpx.HTTPError as exc:
                    last_error = f"transport error: {exc}"
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise BackendFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    data = resp.json()
                    text = data["choices"][0]["message"]["content"] or ""
                    usage = data.get("usage") or {}
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    last_error = f"unreadable response: {exc}"
                    continue
                return Completion(
                    text,
                    int(usage.get("prompt_tokens", estimate_tokens(request.prompt))),
                    int(usage.get("completion_tokens", estimate_tokens(text))),
                )
        raise BackendFailure(f"{request.contract_id}: giving up after {self.transport_retries + 1} tries ({last_error})")

"""Generation backends: a deterministic scripted simulator and an HTTP client.

The scripted backend exists so the whole engine can be exercised and measured
without any model server. Every draw it makes is a pure function of the run
seed and the request's (role, problem_id, iteration) tags, so batch results do
not depend on thread interleaving or wall clock.

The HTTP backend speaks the common chat-completions wire shape:
POST {base_url}/v1/chat/completions with a single user message, bearer auth
from the LORID_API_KEY environment variable, and bounded retries with
exponential backoff on transport errors, 429, and 5xx responses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import httpx

from .core import AdapterRole
from .errors import (
    MalformedRecord,
    ProtocolFailure,
    RetriesExhausted,
    ScriptMiss,
)

logger = logging.getLogger(__name__)

__all__ = [
    "API_KEY_ENV",
    "FinishReason",
    "GenerationRequest",
    "GenerationResult",
    "HealthState",
    "HealthStatus",
    "HttpBackend",
    "RequestTags",
    "ScriptEntry",
    "ScriptTable",
    "ScriptedBackend",
    "derive_seed",
]

API_KEY_ENV = "LORID_API_KEY"

PROB_SUM_TOL = 1e-9


class FinishReason(Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class RequestTags:
    """Determinism keying for one call; iteration is 0-based."""

    problem_id: str
    iteration: int


@dataclass(frozen=True)
class GenerationRequest:
    role: AdapterRole
    prompt: str
    top_p: float = 0.90
    temperature: float = 1.50
    max_tokens: int = 1024
    seed: int | None = None
    tags: RequestTags | None = None


@dataclass(frozen=True)
class GenerationResult:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    latency_ms: int = 0
    attempt_count: int = 1

    def __post_init__(self):
        if not self.text and self.finish_reason is not FinishReason.ERROR:
            raise ValueError("empty text is only allowed with finish_reason=error")


class HealthState(Enum):
    READY = "ready"
    NOT_READY = "not-ready"
    UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class HealthStatus:
    state: HealthState
    served_models: tuple[str, ...] = ()
    missing_roles: tuple[str, ...] = ()
    detail: str = ""


def derive_seed(
    run_seed: int, role: AdapterRole, problem_id: str, iteration: int, ordinal: int = 0
) -> int:
    """Per-call seed, sha256-based so it never varies across platforms or releases.

    ordinal counts earlier calls with the same (role, problem_id, iteration)
    key, which keeps repeated draws against one scripted entry fresh while
    staying reproducible.
    """
    payload = f"{run_seed}|{role.value}|{problem_id}|{iteration}|{ordinal}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


# --------------------------------------------------------------------------
# scripted backend


@dataclass(frozen=True)
class ScriptEntry:
    """Either a fixed completion sequence or a seeded completion distribution."""

    completions: tuple[str, ...] = ()
    distribution: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if bool(self.completions) == bool(self.distribution):
            raise ValueError("exactly one of completions/distribution must be given")
        if self.distribution:
            total = sum(p for _, p in self.distribution)
            if abs(total - 1.0) > PROB_SUM_TOL:
                raise ValueError(f"distribution probabilities sum to {total!r}, not 1")
            if any(p < 0 for _, p in self.distribution):
                raise ValueError("distribution probabilities must be >= 0")


# Key layout: (role value, problem_id, iteration or None). None scripts every
# iteration the exact keys do not cover.
ScriptKey = tuple[str, str, "int | None"]


class ScriptTable:
    """The scripted backend's lookup table.

    Lookup tries the exact (role, problem_id, iteration) key first and then a
    wildcard entry for the same role and problem with iteration null. Misses
    raise ScriptMiss rather than inventing output.
    """

    def __init__(self, entries: dict[ScriptKey, ScriptEntry]):
        self._entries = dict(entries)

    def lookup(self, role: AdapterRole, problem_id: str, iteration: int) -> tuple[ScriptKey, ScriptEntry]:
        exact: ScriptKey = (role.value, problem_id, iteration)
        if exact in self._entries:
            return exact, self._entries[exact]
        wildcard: ScriptKey = (role.value, problem_id, None)
        if wildcard in self._entries:
            return wildcard, self._entries[wildcard]
        raise ScriptMiss(f"no script for role={role.value} problem={problem_id!r} iteration={iteration}")

    def roles(self) -> set[str]:
        return {key[0] for key in self._entries}

    def __len__(self) -> int:
        return len(self._entries)

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self._entries, key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2])):
            entry = self._entries[key]
            h.update(
                json.dumps(
                    [list(key), list(entry.completions), [list(d) for d in entry.distribution]],
                    ensure_ascii=False,
                ).encode()
            )
            h.update(b"\n")
        return h.hexdigest()

    @staticmethod
    def from_records(records: list[dict], path: str = "<records>") -> "ScriptTable":
        entries: dict[ScriptKey, ScriptEntry] = {}
        for i, rec in enumerate(records, start=1):
            try:
                role = AdapterRole(str(rec["role"]).lower())
                problem_id = str(rec["problem_id"])
                iteration = rec.get("iteration")
                if iteration is not None:
                    iteration = int(iteration)
                if "completions" in rec:
                    entry = ScriptEntry(completions=tuple(rec["completions"]))
                elif "distribution" in rec:
                    entry = ScriptEntry(
                        distribution=tuple((str(t), float(p)) for t, p in rec["distribution"])
                    )
                else:
                    raise ValueError("record needs completions or distribution")
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedRecord(path, i, str(exc)) from exc
            key: ScriptKey = (role.value, problem_id, iteration)
            if key in entries:
                raise MalformedRecord(path, i, f"duplicate script key {key}")
            entries[key] = entry
        return ScriptTable(entries)

    @staticmethod
    def from_jsonl(path: str | Path) -> "ScriptTable":
        records = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise MalformedRecord(path, i, f"invalid json: {exc}") from exc
        return ScriptTable.from_records(records, path=str(path))


class ScriptedBackend:
    """Deterministic stand-in for a model server.

    Completion lists are consumed in order across repeated calls with the same
    key (the last one repeats once exhausted); distributions are drawn with a
    seed derived from (run_seed, role, problem_id, iteration, call ordinal).
    Two instances built from the same table and seed behave identically.
    """

    def __init__(self, table: ScriptTable, run_seed: int = 0, source: str = "inline"):
        self._table = table
        self._run_seed = run_seed
        self._source = source
        self._counts: dict[ScriptKey, int] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> GenerationResult:
        tags = request.tags or RequestTags(problem_id="", iteration=0)
        key, entry = self._table.lookup(request.role, tags.problem_id, tags.iteration)
        with self._lock:
            ordinal = self._counts.get(key, 0)
            self._counts[key] = ordinal + 1
        if entry.completions:
            text = entry.completions[min(ordinal, len(entry.completions) - 1)]
        else:
            seed = derive_seed(
                self._run_seed, request.role, tags.problem_id, tags.iteration, ordinal
            )
            roll = random.Random(seed).random()
            cumulative = 0.0
            text = entry.distribution[-1][0]
            for candidate, prob in entry.distribution:
                cumulative += prob
                if roll < cumulative:
                    text = candidate
                    break
        return GenerationResult(text=text, finish_reason=FinishReason.STOP, latency_ms=0)

    def probe(self, required_roles: tuple[AdapterRole, ...] = ()) -> HealthStatus:
        served = tuple(sorted(self._table.roles()))
        missing = tuple(r.value for r in required_roles if r.value not in served)
        if missing:
            return HealthStatus(HealthState.NOT_READY, served_models=served, missing_roles=missing)
        return HealthStatus(HealthState.READY, served_models=served)

    def describe(self) -> dict:
        return {"kind": "scripted", "source": self._source, "table_digest": self._table.digest()}


# --------------------------------------------------------------------------
# HTTP backend

RETRYABLE_STATUS = {429}


def _is_retryable_status(status_code: int) -> bool:
    return status_code in RETRYABLE_STATUS or 500 <= status_code <= 599


class HttpBackend:
    """Chat-completions client for a server hosting the role adapters as models.

    role_models maps each adapter role to the model name the server exposes.
    retries counts attempts after the first one; the backoff before retry k is
    min(backoff_cap, backoff_base * 2**k) seconds with no jitter, so tests and
    reruns see the same schedule.
    """

    def __init__(
        self,
        base_url: str,
        role_models: dict[AdapterRole, str],
        *,
        api_key: str | None = None,
        timeout: float = 120.0,
        retries: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_in_flight: int = 8,
        sleep=time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self._base_url = base_url.rstrip("/")
        self._role_models = dict(role_models)
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._retries = retries
        self._backoff_base = backoff_base
        self._backoff_cap = backoff_cap
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def generate(self, request: GenerationRequest) -> GenerationResult:
        model = self._role_models.get(request.role)
        if model is None:
            raise ProtocolFailure(f"no model configured for role {request.role.value!r}")
        body = {
            "model": model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        url = f"{self._base_url}/v1/chat/completions"
        started = time.monotonic()
        last_failure = ""
        for attempt in range(self._retries + 1):
            if attempt:
                self._sleep(min(self._backoff_cap, self._backoff_base * 2 ** (attempt - 1)))
            try:
                with self._semaphore:
                    response = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_failure = f"transport: {exc}"
                logger.warning("attempt %d failed (%s)", attempt + 1, last_failure)
                continue
            if _is_retryable_status(response.status_code):
                last_failure = f"status {response.status_code}"
                logger.warning("attempt %d failed (%s)", attempt + 1, last_failure)
                continue
            if response.status_code != 200:
                raise ProtocolFailure(
                    f"server returned {response.status_code}: {response.text[:200]}"
                )
            latency_ms = int((time.monotonic() - started) * 1000)
            return self._parse_completion(response, latency_ms, attempt + 1)
        raise RetriesExhausted(
            f"gave up after {self._retries + 1} attempts; last failure: {last_failure}"
        )

    @staticmethod
    def _parse_completion(response: httpx.Response, latency_ms: int, attempts: int) -> GenerationResult:
        try:
            payload = response.json()
            choice = payload["choices"][0]
            content = choice.get("message", {}).get("content")
            reason = choice.get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolFailure(f"malformed completion payload: {exc}") from exc
        finish = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH}.get(
            reason, FinishReason.STOP
        )
        if not content:
            return GenerationResult(
                text="", finish_reason=FinishReason.ERROR, latency_ms=latency_ms, attempt_count=attempts
            )
        return GenerationResult(
            text=content, finish_reason=finish, latency_ms=latency_ms, attempt_count=attempts
        )

    def probe(self, required_roles: tuple[AdapterRole, ...] = ()) -> HealthStatus:
        url = f"{self._base_url}/v1/models"
        try:
            response = self._client.get(url, headers=self._headers())
        except httpx.TransportError as exc:
            return HealthStatus(HealthState.UNREACHABLE, detail=str(exc))
        if response.status_code != 200:
            return HealthStatus(HealthState.UNREACHABLE, detail=f"status {response.status_code}")
        try:
            served = tuple(sorted(item["id"] for item in response.json().get("data", [])))
        except (ValueError, KeyError, TypeError) as exc:
            return HealthStatus(HealthState.UNREACHABLE, detail=f"malformed model list: {exc}")
        required = required_roles or tuple(self._role_models)
        missing = tuple(
            role.value
            for role in required
            if self._role_models.get(role) is None or self._role_models[role] not in served
        )
        if missing:
            return HealthStatus(HealthState.NOT_READY, served_models=served, missing_roles=missing)
        return HealthStatus(HealthState.READY, served_models=served)

    def describe(self) -> dict:
        return {
            "kind": "http",
            "base_url": self._base_url,
            "models": {role.value: name for role, name in sorted(
                self._role_models.items(), key=lambda kv: kv[0].value
            )},
        }

    def close(self) -> None:
        self._client.close()

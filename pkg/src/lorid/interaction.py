"""The agreement-driven interaction loop and its batch driver.

Each iteration asks the intuitive lane (IR) for a direct solution and the
knowledge lane (KG then DR) for a grounded one, then records both extracted
answers. The loop stops the first time the two answer multisets share a
canonical key; runs that never agree within the iteration budget fall back to
a majority vote. A self-consistency mode (k independent samples, majority
vote) is provided for baselines.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .answers import (
    AnswerValue,
    answer_from_json,
    answer_to_json,
    canonical_key,
    extract_final_answer,
)
from .augment import compose_dr_input
from .backend import GenerationRequest, HealthState, RequestTags, derive_seed
from .core import (
    AdapterRole,
    FallbackPolicy,
    InteractionConfig,
    Problem,
    corpus_digest,
    validate_corpus,
)
from .errors import (
    BackendUnavailable,
    InvalidCorpus,
    NoAnswerFound,
    ProtocolFailure,
    RetriesExhausted,
    RunAborted,
    ScriptMiss,
    TransportFailure,
)

logger = logging.getLogger(__name__)

__all__ = [
    "IterationRecord",
    "RecordedAnswer",
    "RunArtifacts",
    "RunMode",
    "Transcript",
    "TranscriptStatus",
    "batch_run",
    "build_manifest",
    "decide_final",
    "majority_vote",
    "read_transcripts",
    "roles_for",
    "run_interaction",
    "run_sc_cot",
    "transcript_from_json",
    "transcript_to_json",
    "write_transcripts",
]

TRANSCRIPT_SCHEMA_VERSION = 1

# Backend errors a batch run survives; everything else is a bug and propagates.
_BACKEND_ERRORS = (ScriptMiss, TransportFailure, ProtocolFailure, RetriesExhausted)


class TranscriptStatus(Enum):
    AGREED = "agreed"
    EXHAUSTED = "exhausted"
    BACKEND_FAILED = "backend_failed"


@dataclass(frozen=True)
class IterationRecord:
    """Everything one iteration produced. Answers are None when extraction failed."""

    index: int  # 1-based, strictly increasing within a transcript
    ir_output: str
    ir_answer: AnswerValue | None
    kg_knowledge: str
    dr_output: str
    dr_answer: AnswerValue | None

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("iteration index is 1-based")


@dataclass(frozen=True)
class RecordedAnswer:
    """One extracted answer with enough position data to break ties later."""

    key: str
    value: AnswerValue
    iteration: int
    lane: AdapterRole


@dataclass(frozen=True)
class Transcript:
    """The full record of one problem's run.

    ir_answer_keys/dr_answer_keys are the canonical keys of every extracted
    answer in iteration order; together with the iteration records they are
    the multisets the stopping rule intersected.
    """

    problem_id: str
    iterations: tuple[IterationRecord, ...]
    ir_answer_keys: tuple[str, ...]
    dr_answer_keys: tuple[str, ...]
    final_answer: AnswerValue | None
    status: TranscriptStatus
    iterations_used: int
    error: str = ""

    def __post_init__(self):
        if self.iterations_used != len(self.iterations):
            raise ValueError("iterations_used must equal the number of iteration records")
        expected_ir = tuple(
            canonical_key(r.ir_answer) for r in self.iterations if r.ir_answer is not None
        )
        expected_dr = tuple(
            canonical_key(r.dr_answer) for r in self.iterations if r.dr_answer is not None
        )
        if self.ir_answer_keys != expected_ir or self.dr_answer_keys != expected_dr:
            raise ValueError("answer key lists must mirror the extracted iteration answers")
        if self.status is TranscriptStatus.AGREED:
            if self.final_answer is None:
                raise ValueError("agreed transcripts must carry a final answer")
            key = canonical_key(self.final_answer)
            if key not in set(self.ir_answer_keys) or key not in set(self.dr_answer_keys):
                raise ValueError("agreed final answer must appear in both answer sets")


@dataclass(frozen=True)
class RunMode:
    """Which engine drives a batch: the interaction loop or self-consistency."""

    kind: str  # "lorid" | "sc-cot"
    k: int = 1
    system: int = 1

    def __post_init__(self):
        if self.kind not in ("lorid", "sc-cot"):
            raise ValueError(f"unknown run mode {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.system not in (1, 2):
            raise ValueError("system must be 1 or 2")

    def label(self) -> str:
        if self.kind == "lorid":
            return "lorid"
        return f"sc-cot-k{self.k}-s{self.system}"

    def to_json(self) -> dict:
        return {"kind": self.kind, "k": self.k, "system": self.system}

    @staticmethod
    def from_json(obj: dict) -> "RunMode":
        return RunMode(kind=obj["kind"], k=int(obj.get("k", 1)), system=int(obj.get("system", 1)))


def roles_for(mode: RunMode) -> tuple[AdapterRole, ...]:
    if mode.kind == "lorid":
        return (AdapterRole.IR, AdapterRole.KG, AdapterRole.DR)
    if mode.system == 1:
        return (AdapterRole.IR,)
    return (AdapterRole.KG, AdapterRole.DR)


def _request(
    role: AdapterRole, prompt: str, config: InteractionConfig, problem_id: str, iteration: int
) -> GenerationRequest:
    return GenerationRequest(
        role=role,
        prompt=prompt,
        top_p=config.top_p,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        seed=derive_seed(config.run_seed, role, problem_id, iteration),
        tags=RequestTags(problem_id=problem_id, iteration=iteration),
    )


def _try_extract(text: str) -> AnswerValue | None:
    try:
        return extract_final_answer(text)
    except NoAnswerFound:
        return None


# --------------------------------------------------------------------------
# final-answer selection


def _merged_order(
    ir_answers: list[RecordedAnswer] | tuple[RecordedAnswer, ...],
    dr_answers: list[RecordedAnswer] | tuple[RecordedAnswer, ...],
) -> list[RecordedAnswer]:
    # Global appearance order: by iteration, IR before DR inside an iteration.
    return sorted(
        list(ir_answers) + list(dr_answers),
        key=lambda r: (r.iteration, 0 if r.lane is AdapterRole.IR else 1),
    )


def decide_final(
    ir_answers: list[RecordedAnswer] | tuple[RecordedAnswer, ...],
    dr_answers: list[RecordedAnswer] | tuple[RecordedAnswer, ...],
    policy: FallbackPolicy,
    agreed: bool,
) -> AnswerValue | None:
    """Pick the final answer from the two recorded answer multisets.

    When the lanes agreed, the winner is the intersection key with the highest
    combined multiplicity, ties going to the key seen earliest. On exhaustion
    the fallback policy decides: a majority over the union (ties prefer the
    key with more IR support, then the earliest), a majority over IR alone, or
    no answer at all.
    """
    merged = _merged_order(ir_answers, dr_answers)
    first_seen: dict[str, int] = {}
    representative: dict[str, AnswerValue] = {}
    for pos, rec in enumerate(merged):
        first_seen.setdefault(rec.key, pos)
        representative.setdefault(rec.key, rec.value)
    counts = Counter(rec.key for rec in merged)
    ir_counts = Counter(rec.key for rec in ir_answers)

    if agreed:
        shared = {r.key for r in ir_answers} & {r.key for r in dr_answers}
        if not shared:
            raise ValueError("agreed=True requires a non-empty key intersection")
        best = min(shared, key=lambda k: (-counts[k], first_seen[k]))
        return representative[best]

    if policy is FallbackPolicy.NONE or not merged:
        return None
    if policy is FallbackPolicy.MAJORITY_UNION:
        best = min(counts, key=lambda k: (-counts[k], -ir_counts[k], first_seen[k]))
        return representative[best]
    if policy is FallbackPolicy.MAJORITY_IR:
        if not ir_answers:
            return None
        ir_first: dict[str, int] = {}
        for pos, rec in enumerate(ir_answers):
            ir_first.setdefault(rec.key, pos)
        best = min(ir_counts, key=lambda k: (-ir_counts[k], ir_first[k]))
        return representative[best]
    raise ValueError(f"unhandled fallback policy {policy!r}")


def majority_vote(records: list[RecordedAnswer]) -> AnswerValue | None:
    """Plain majority over canonical keys; ties go to the earliest-sampled key."""
    if not records:
        return None
    counts = Counter(rec.key for rec in records)
    first_seen: dict[str, int] = {}
    representative: dict[str, AnswerValue] = {}
    for pos, rec in enumerate(records):
        first_seen.setdefault(rec.key, pos)
        representative.setdefault(rec.key, rec.value)
    best = min(counts, key=lambda k: (-counts[k], first_seen[k]))
    return representative[best]


# --------------------------------------------------------------------------
# single-problem engines


def run_interaction(problem: Problem, config: InteractionConfig, backend) -> Transcript:
    """Run the interaction loop on one problem until agreement or exhaustion.

    Every iteration makes exactly three generate calls (IR, KG, DR) and
    appends whatever answers could be extracted; extraction failures consume
    the iteration without contributing. Backend failures keep the partial
    transcript and mark it backend_failed.
    """
    ir_answers: list[RecordedAnswer] = []
    dr_answers: list[RecordedAnswer] = []
    iterations: list[IterationRecord] = []
    status = TranscriptStatus.EXHAUSTED
    final: AnswerValue | None = None
    error = ""
    try:
        for index in range(1, config.threshold + 1):
            step = index - 1
            ir_result = backend.generate(
                _request(AdapterRole.IR, problem.question, config, problem.id, step)
            )
            kg_result = backend.generate(
                _request(AdapterRole.KG, problem.question, config, problem.id, step)
            )
            dr_result = backend.generate(
                _request(
                    AdapterRole.DR,
                    compose_dr_input(problem.question, kg_result.text),
                    config,
                    problem.id,
                    step,
                )
            )
            ir_answer = _try_extract(ir_result.text)
            dr_answer = _try_extract(dr_result.text)
            if ir_answer is not None:
                ir_answers.append(
                    RecordedAnswer(canonical_key(ir_answer), ir_answer, index, AdapterRole.IR)
                )
            if dr_answer is not None:
                dr_answers.append(
                    RecordedAnswer(canonical_key(dr_answer), dr_answer, index, AdapterRole.DR)
                )
            iterations.append(
                IterationRecord(
                    index=index,
                    ir_output=ir_result.text,
                    ir_answer=ir_answer,
                    kg_knowledge=kg_result.text,
                    dr_output=dr_result.text,
                    dr_answer=dr_answer,
                )
            )
            if {r.key for r in ir_answers} & {r.key for r in dr_answers}:
                status = TranscriptStatus.AGREED
                final = decide_final(ir_answers, dr_answers, config.fallback, agreed=True)
                break
        else:
            final = decide_final(ir_answers, dr_answers, config.fallback, agreed=False)
    except _BACKEND_ERRORS as exc:
        status = TranscriptStatus.BACKEND_FAILED
        final = None
        error = str(exc)
        logger.warning("backend failed on problem %s: %s", problem.id, error)
    return Transcript(
        problem_id=problem.id,
        iterations=tuple(iterations),
        ir_answer_keys=tuple(r.key for r in ir_answers),
        dr_answer_keys=tuple(r.key for r in dr_answers),
        final_answer=final,
        status=status,
        iterations_used=len(iterations),
        error=error,
    )


def run_sc_cot(
    problem: Problem, k: int, system: int, config: InteractionConfig, backend
) -> Transcript:
    """Self-consistency baseline: k independent samples, majority vote.

    system 1 samples the IR lane directly; system 2 runs the KG then DR chain
    per sample and votes on the DR answers. The transcript reports status
    exhausted because the budget is always spent before the vote; agreed is
    reserved for cross-lane agreement.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if system not in (1, 2):
        raise ValueError("system must be 1 or 2")
    records: list[RecordedAnswer] = []
    iterations: list[IterationRecord] = []
    status = TranscriptStatus.EXHAUSTED
    error = ""
    try:
        for sample in range(k):
            index = sample + 1
            if system == 1:
                result = backend.generate(
                    _request(AdapterRole.IR, problem.question, config, problem.id, sample)
                )
                answer = _try_extract(result.text)
                if answer is not None:
                    records.append(
                        RecordedAnswer(canonical_key(answer), answer, index, AdapterRole.IR)
                    )
                iterations.append(
                    IterationRecord(index, result.text, answer, "", "", None)
                )
            else:
                kg_result = backend.generate(
                    _request(AdapterRole.KG, problem.question, config, problem.id, sample)
                )
                dr_result = backend.generate(
                    _request(
                        AdapterRole.DR,
                        compose_dr_input(problem.question, kg_result.text),
                        config,
                        problem.id,
                        sample,
                    )
                )
                answer = _try_extract(dr_result.text)
                if answer is not None:
                    records.append(
                        RecordedAnswer(canonical_key(answer), answer, index, AdapterRole.DR)
                    )
                iterations.append(
                    IterationRecord(index, "", None, kg_result.text, dr_result.text, answer)
                )
    except _BACKEND_ERRORS as exc:
        status = TranscriptStatus.BACKEND_FAILED
        error = str(exc)
        logger.warning("backend failed on problem %s: %s", problem.id, error)
    final = None if status is TranscriptStatus.BACKEND_FAILED else majority_vote(records)
    return Transcript(
        problem_id=problem.id,
        iterations=tuple(iterations),
        ir_answer_keys=tuple(r.key for r in records if r.lane is AdapterRole.IR),
        dr_answer_keys=tuple(r.key for r in records if r.lane is AdapterRole.DR),
        final_answer=final,
        status=status,
        iterations_used=len(iterations),
        error=error,
    )


# --------------------------------------------------------------------------
# batch driver


@dataclass(frozen=True)
class RunArtifacts:
    transcripts: tuple[Transcript, ...]
    manifest: dict
    failures: tuple[tuple[str, str], ...]  # (problem_id, error)

    @property
    def status(self) -> str:
        return "partial" if self.failures else "complete"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def build_manifest(
    problems: list[Problem],
    config: InteractionConfig,
    backend,
    mode: RunMode,
    started: str | None = None,
    finished: str | None = None,
    status: str = "running",
) -> dict:
    """Run manifest; run_id hashes everything that determines the results.

    Two fields stay out of the hash because they cannot change results:
    concurrency_limit (scheduling only) and the backend description's
    source field (display-only provenance, e.g. a script file's path; the
    table digest already identifies the content).
    """
    config_fields = config.to_json_dict()
    config_fields.pop("concurrency_limit", None)
    backend_fields = dict(backend.describe())
    backend_fields.pop("source", None)
    identity = {
        "mode": mode.to_json(),
        "config": config_fields,
        "corpus_digest": corpus_digest(problems),
        "backend": backend_fields,
    }
    run_id = hashlib.sha256(
        json.dumps(identity, sort_keys=True, ensure_ascii=False).encode()
    ).hexdigest()[:12]
    return {
        "v": 1,
        "run_id": run_id,
        "mode": identity["mode"],
        "config": config.to_json_dict(),
        "seed": config.run_seed,
        "corpus_digest": identity["corpus_digest"],
        "backend": backend.describe(),
        "n_problems": len(problems),
        "status": status,
        "started": started,
        "finished": finished,
    }


def batch_run(
    problems: list[Problem],
    config: InteractionConfig,
    backend,
    mode: RunMode,
    abort_after_failures: int | None = None,
) -> RunArtifacts:
    """Run a whole corpus under bounded concurrency.

    Transcripts come back in input order regardless of completion order.
    Per-problem backend failures are aggregated rather than fatal unless they
    exceed abort_after_failures, in which case the run stops with RunAborted.
    """
    report = validate_corpus(problems)
    if not report.accepted:
        raise InvalidCorpus(report)
    health = backend.probe(roles_for(mode))
    if health.state is not HealthState.READY:
        raise BackendUnavailable(
            f"backend probe came back {health.state.value}"
            + (f" (missing: {', '.join(health.missing_roles)})" if health.missing_roles else "")
            + (f": {health.detail}" if health.detail else "")
        )
    started = _utc_now()
    abort = threading.Event()
    failure_lock = threading.Lock()
    failures_seen = 0

    def run_one(problem: Problem) -> Transcript:
        nonlocal failures_seen
        if abort.is_set():
            raise RunAborted("failure threshold crossed, remaining problems skipped")
        if mode.kind == "lorid":
            transcript = run_interaction(problem, config, backend)
        else:
            transcript = run_sc_cot(problem, mode.k, mode.system, config, backend)
        if transcript.status is TranscriptStatus.BACKEND_FAILED and abort_after_failures is not None:
            with failure_lock:
                failures_seen += 1
                if failures_seen > abort_after_failures:
                    abort.set()
        return transcript

    with ThreadPoolExecutor(max_workers=config.concurrency_limit) as executor:
        futures = [executor.submit(run_one, p) for p in problems]
        transcripts = tuple(f.result() for f in futures)

    failures = tuple(
        (t.problem_id, t.error) for t in transcripts if t.status is TranscriptStatus.BACKEND_FAILED
    )
    manifest = build_manifest(
        problems,
        config,
        backend,
        mode,
        started=started,
        finished=_utc_now(),
        status="partial" if failures else "complete",
    )
    return RunArtifacts(transcripts=transcripts, manifest=manifest, failures=failures)


# --------------------------------------------------------------------------
# serialization


def _iteration_to_json(record: IterationRecord) -> dict:
    return {
        "index": record.index,
        "ir_output": record.ir_output,
        "ir_answer": answer_to_json(record.ir_answer) if record.ir_answer else None,
        "kg_knowledge": record.kg_knowledge,
        "dr_output": record.dr_output,
        "dr_answer": answer_to_json(record.dr_answer) if record.dr_answer else None,
    }


def _iteration_from_json(obj: dict) -> IterationRecord:
    return IterationRecord(
        index=obj["index"],
        ir_output=obj["ir_output"],
        ir_answer=answer_from_json(obj["ir_answer"]) if obj.get("ir_answer") else None,
        kg_knowledge=obj["kg_knowledge"],
        dr_output=obj["dr_output"],
        dr_answer=answer_from_json(obj["dr_answer"]) if obj.get("dr_answer") else None,
    )


def transcript_to_json(t: Transcript) -> dict:
    return {
        "v": TRANSCRIPT_SCHEMA_VERSION,
        "problem_id": t.problem_id,
        "status": t.status.value,
        "iterations_used": t.iterations_used,
        "final_answer": answer_to_json(t.final_answer) if t.final_answer else None,
        "ir_answer_keys": list(t.ir_answer_keys),
        "dr_answer_keys": list(t.dr_answer_keys),
        "error": t.error,
        "iterations": [_iteration_to_json(r) for r in t.iterations],
    }


def transcript_from_json(obj: dict) -> Transcript:
    if obj.get("v") != TRANSCRIPT_SCHEMA_VERSION:
        raise ValueError(f"unsupported transcript schema version {obj.get('v')!r}")
    return Transcript(
        problem_id=obj["problem_id"],
        iterations=tuple(_iteration_from_json(r) for r in obj["iterations"]),
        ir_answer_keys=tuple(obj["ir_answer_keys"]),
        dr_answer_keys=tuple(obj["dr_answer_keys"]),
        final_answer=answer_from_json(obj["final_answer"]) if obj.get("final_answer") else None,
        status=TranscriptStatus(obj["status"]),
        iterations_used=obj["iterations_used"],
        error=obj.get("error", ""),
    )


def write_transcripts(path: str | Path, transcripts) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in transcripts:
            fh.write(json.dumps(transcript_to_json(t), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_transcripts(path: str | Path) -> list[Transcript]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(transcript_from_json(json.loads(line)))
    return out

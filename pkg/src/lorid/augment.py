"""Knowledge generation and SFT dataset emission.

A teacher model is asked once per origin problem to state the general
knowledge behind the gold solution. That knowledge is then shared across all
variants of the origin, and three aligned instruction-tuning datasets are
written: IR (question to solution), KG (question to knowledge), and DR
(question plus knowledge to solution).
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .answers import AnswerValue, render_answer
from .backend import GenerationRequest, RequestTags, derive_seed
from .core import AdapterRole, Knowledge, KnowledgeSet, Problem, Source
from .errors import (
    MalformedRecord,
    MissingGold,
    MissingKnowledge,
    ProtocolFailure,
    RetriesExhausted,
    ScriptMiss,
    TransportFailure,
)
from .evalharness import parse_gsm_record

logger = logging.getLogger(__name__)

__all__ = [
    "KNOWLEDGE_INSTRUCTION",
    "KNOWLEDGE_PROMPT_VERSION",
    "KnowledgePrompt",
    "SftRecord",
    "build_knowledge_prompt",
    "compose_dr_input",
    "compose_solution",
    "emit_sft_datasets",
    "generate_knowledge",
    "load_knowledge",
    "load_variants",
    "save_knowledge",
    "share_knowledge",
]

# The canonical teacher instruction. Changing it is a new prompt version.
KNOWLEDGE_INSTRUCTION = (
    "State the general knowledge needed to solve this problem, "
    "independent of its specific numbers."
)
KNOWLEDGE_PROMPT_VERSION = "knowledge-prompt-v1"

# Teacher sampling stays mild regardless of the run's inference settings.
TEACHER_TEMPERATURE = 0.7
TEACHER_TOP_P = 0.95

_BACKEND_ERRORS = (ScriptMiss, TransportFailure, ProtocolFailure, RetriesExhausted)


@dataclass(frozen=True)
class KnowledgePrompt:
    """The four pieces the teacher sees; render() is byte-stable."""

    instruction: str
    question: str
    reasoning: str
    answer: str

    def render(self) -> str:
        return (
            f"{self.instruction}\n"
            "\n"
            f"Question:\n{self.question}\n"
            "\n"
            f"Reasoning:\n{self.reasoning}\n"
            "\n"
            f"Answer:\n{self.answer}\n"
        )


def build_knowledge_prompt(problem: Problem) -> KnowledgePrompt:
    if problem.gold_reasoning is None or problem.gold_answer is None:
        raise MissingGold([problem.id])
    return KnowledgePrompt(
        instruction=KNOWLEDGE_INSTRUCTION,
        question=problem.question,
        reasoning=problem.gold_reasoning,
        answer=render_answer(problem.gold_answer),
    )


def compose_dr_input(question: str, knowledge: str) -> str:
    """The DR lane's input format, identical at training and inference time."""
    return f"Question: {question}\nKnowledge: {knowledge}"


def compose_solution(reasoning: str, answer: AnswerValue) -> str:
    """Target text for solution lanes; the delimiter keeps answers re-extractable."""
    return f"{reasoning.rstrip()}\n#### {render_answer(answer)}"


# --------------------------------------------------------------------------
# knowledge generation


def save_knowledge(path: str | Path, knowledge_set: KnowledgeSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in sorted(knowledge_set, key=lambda k: k.origin_id):
            fh.write(json.dumps({"origin_id": item.origin_id, "text": item.text}, ensure_ascii=False))
            fh.write("\n")


def load_knowledge(path: str | Path) -> KnowledgeSet:
    ks = KnowledgeSet()
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ks.add(Knowledge(origin_id=obj["origin_id"], text=obj["text"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise MalformedRecord(path, i, str(exc)) from exc
    return ks


def generate_knowledge(
    originals: list[Problem],
    backend,
    *,
    checkpoint_path: str | Path | None = None,
    temperature: float = TEACHER_TEMPERATURE,
    top_p: float = TEACHER_TOP_P,
    max_tokens: int = 1024,
    run_seed: int = 0,
    concurrency: int = 4,
) -> KnowledgeSet:
    """Ask the teacher for knowledge, once per origin problem.

    The checkpoint file doubles as the output store: every completed origin is
    appended as a {origin_id, text} line, and origins already present there
    are not re-requested, so an interrupted run resumes where it stopped.
    Per-item backend failures are logged and skipped; the returned set simply
    lacks those origins.
    """
    seen: set[str] = set()
    for p in originals:
        if p.origin_id in seen:
            raise ValueError(f"originals must be one per origin_id; {p.origin_id!r} repeats")
        seen.add(p.origin_id)
    missing = [p.id for p in originals if p.gold_reasoning is None or p.gold_answer is None]
    if missing:
        raise MissingGold(missing)

    ks = KnowledgeSet()
    if checkpoint_path is not None and Path(checkpoint_path).exists():
        ks = load_knowledge(checkpoint_path)
    todo = [p for p in originals if p.origin_id not in ks.origin_ids()]
    logger.info("generating knowledge for %d of %d origins", len(todo), len(originals))

    write_lock = threading.Lock()

    def run_one(problem: Problem) -> Knowledge | None:
        prompt = build_knowledge_prompt(problem).render()
        request = GenerationRequest(
            role=AdapterRole.TEACHER,
            prompt=prompt,
            top_p=top_p,
            temperature=temperature,
            max_tokens=max_tokens,
            seed=derive_seed(run_seed, AdapterRole.TEACHER, problem.origin_id, 0),
            tags=RequestTags(problem_id=problem.origin_id, iteration=0),
        )
        try:
            result = backend.generate(request)
        except _BACKEND_ERRORS as exc:
            logger.warning("teacher call failed for origin %s: %s", problem.origin_id, exc)
            return None
        if not result.text.strip():
            logger.warning("teacher returned empty knowledge for origin %s", problem.origin_id)
            return None
        return Knowledge(origin_id=problem.origin_id, text=result.text)

    with ThreadPoolExecutor(max_workers=concurrency) as executor:
        futures = [executor.submit(run_one, p) for p in todo]
        for future in futures:
            item = future.result()
            if item is None:
                continue
            ks.add(item)
            if checkpoint_path is not None:
                with write_lock, open(checkpoint_path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(
                        json.dumps({"origin_id": item.origin_id, "text": item.text}, ensure_ascii=False)
                    )
                    fh.write("\n")
    return ks


def share_knowledge(
    problems: list[Problem], knowledge_set: KnowledgeSet
) -> list[tuple[Problem, Knowledge]]:
    """Pair every problem (original or variant) with its origin's knowledge."""
    pairs: list[tuple[Problem, Knowledge]] = []
    for p in problems:
        item = knowledge_set.get(p.origin_id)
        if item is None:
            raise MissingKnowledge(p.origin_id)
        pairs.append((p, item))
    return pairs


# --------------------------------------------------------------------------
# SFT emission


@dataclass(frozen=True)
class SftRecord:
    role: AdapterRole
    input: str
    output: str
    origin_id: str

    def to_json(self) -> dict:
        # Key order is part of the file contract.
        return {
            "role": self.role.value.upper(),
            "input": self.input,
            "output": self.output,
            "origin_id": self.origin_id,
        }


def _sft_records(pair: tuple[Problem, Knowledge]) -> dict[AdapterRole, SftRecord]:
    problem, knowledge = pair
    solution = compose_solution(problem.gold_reasoning, problem.gold_answer)
    return {
        AdapterRole.IR: SftRecord(AdapterRole.IR, problem.question, solution, problem.origin_id),
        AdapterRole.KG: SftRecord(AdapterRole.KG, problem.question, knowledge.text, problem.origin_id),
        AdapterRole.DR: SftRecord(
            AdapterRole.DR,
            compose_dr_input(problem.question, knowledge.text),
            solution,
            problem.origin_id,
        ),
    }


def emit_sft_datasets(
    pairs: list[tuple[Problem, Knowledge]], out_dir: str | Path
) -> dict[AdapterRole, Path]:
    """Write the three aligned datasets; one record per pair in each file.

    Problems without gold reasoning or answer are collected and reported in a
    single MissingGold error before anything is written.
    """
    missing = [p.id for p, _ in pairs if p.gold_reasoning is None or p.gold_answer is None]
    if missing:
        raise MissingGold(missing)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        AdapterRole.IR: out / "ir.jsonl",
        AdapterRole.KG: out / "kg.jsonl",
        AdapterRole.DR: out / "dr.jsonl",
    }
    handles = {
        role: open(path, "w", encoding="utf-8", newline="\n") for role, path in paths.items()
    }
    try:
        for pair in pairs:
            for role, record in _sft_records(pair).items():
                handles[role].write(json.dumps(record.to_json(), ensure_ascii=False))
                handles[role].write("\n")
    finally:
        for fh in handles.values():
            fh.close()
    return paths


# --------------------------------------------------------------------------
# variant corpus loading


def load_variants(path: str | Path, base: list[Problem]) -> list[Problem]:
    """Load an augmented-variant file and resolve each record to its origin.

    Records carry question/answer pairs (query/response also accepted) plus an
    origin_id. When origin_id is absent, the only safe fallback is an exact
    text match: first on an original_question field, then on the variant's own
    question. Records that resolve to nothing are collected into one error.
    """
    by_question = {p.question: p.id for p in base if p.is_original}
    base_ids = {p.id for p in base}
    source_by_id = {p.id: p.source for p in base}
    stem = Path(path).stem
    problems: list[Problem] = []
    unresolved: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, i, f"invalid json: {exc}") from exc
            question = rec.get("question", rec.get("query"))
            answer_text = rec.get("answer", rec.get("response"))
            if not question or not answer_text:
                raise MalformedRecord(path, i, "record needs question/answer (or query/response)")
            origin = rec.get("origin_id")
            if origin is not None and origin not in base_ids:
                raise MalformedRecord(path, i, f"origin_id {origin!r} not in the base corpus")
            if origin is None:
                origin = by_question.get(rec.get("original_question", "")) or by_question.get(question)
            if origin is None:
                unresolved.append(i)
                continue
            reasoning, gold = parse_gsm_record(answer_text)
            source = source_by_id.get(origin, Source.CUSTOM)
            problems.append(
                Problem(
                    id=rec.get("id", f"{stem}-{len(problems):05d}"),
                    question=question,
                    origin_id=origin,
                    source=source,
                    gold_reasoning=reasoning,
                    gold_answer=gold,
                )
            )
    if unresolved:
        raise MalformedRecord(
            path,
            unresolved[0],
            f"{len(unresolved)} record(s) have no origin_id and match no base question "
            f"(lines {unresolved[:10]})",
        )
    return problems

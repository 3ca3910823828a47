"""Dataset loading, scoring, difficulty bucketing, and report rendering."""

from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

from .answers import (
    AnswerValue,
    ExtractionStrategy,
    answers_equal,
    extract_final_answer,
)
from .core import (
    GSM_EXPECTED_STEP_RANGE,
    GSM_STEPS,
    DifficultyTag,
    Problem,
    Source,
    gsm_step_count,
)
from .errors import IdMismatch, MalformedRecord, NoAnswerFound

logger = logging.getLogger(__name__)

__all__ = [
    "BucketRow",
    "ReportRow",
    "RunMetrics",
    "bucket_by_difficulty",
    "load_corpus",
    "load_gsm8k",
    "load_math",
    "parse_gsm_record",
    "render_report",
    "score_run",
]

# Official split sizes, used by smoke checks when the files are available.
GSM8K_TEST_SIZE = 1319
MATH_TEST_SIZE = 5000

_LEVEL_RE = re.compile(r"^\s*Level\s+(\d)\s*$", re.IGNORECASE)


def parse_gsm_record(answer_text: str) -> tuple[str, AnswerValue | None]:
    """Split a gsm-style solution into (reasoning, gold answer).

    Text after the last ``####`` is the gold answer; without a delimiter the
    whole text is reasoning and the gold falls back to automatic extraction.
    """
    if "####" in answer_text:
        reasoning = answer_text[: answer_text.rfind("####")].rstrip()
        try:
            gold = extract_final_answer(answer_text, ExtractionStrategy.GSM_DELIMITER)
        except NoAnswerFound:
            gold = None
        return reasoning, gold
    try:
        gold = extract_final_answer(answer_text, ExtractionStrategy.AUTO)
    except NoAnswerFound:
        gold = None
    return answer_text.rstrip(), gold


def load_gsm8k(path: str | Path) -> list[Problem]:
    """Load a gsm-style JSONL file of {question, answer} records.

    The answer field holds step-by-step reasoning ending in ``#### value``.
    Difficulty is the number of non-empty reasoning lines. Malformed lines
    raise with their 1-based line number.
    """
    problems: list[Problem] = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, i, f"invalid json: {exc}") from exc
            if "question" not in rec or "answer" not in rec:
                raise MalformedRecord(path, i, "record needs question and answer fields")
            if "####" not in rec["answer"]:
                raise MalformedRecord(path, i, "answer lacks the #### delimiter")
            reasoning, gold = parse_gsm_record(rec["answer"])
            if gold is None:
                raise MalformedRecord(path, i, "no answer after the #### delimiter")
            pid = rec.get("id", f"gsm8k-{len(problems):05d}")
            problems.append(
                Problem(
                    id=pid,
                    question=rec["question"],
                    origin_id=pid,
                    source=Source.GSM8K,
                    gold_reasoning=reasoning,
                    gold_answer=gold,
                    difficulty=DifficultyTag.gsm_steps(gsm_step_count(reasoning)),
                )
            )
    return problems


def _math_problem(rec: dict, pid: str, where: str, line: int) -> Problem:
    for field in ("problem", "solution", "level"):
        if field not in rec:
            raise MalformedRecord(where, line, f"record lacks the {field} field")
    level_raw = rec["level"]
    difficulty = None
    if isinstance(level_raw, int):
        difficulty = DifficultyTag.math_level(level_raw)
    else:
        m = _LEVEL_RE.match(str(level_raw))
        if m:
            difficulty = DifficultyTag.math_level(int(m.group(1)))
        else:
            warnings.warn(f"{where}:{line}: unparseable level {level_raw!r}, left untagged")
    try:
        gold = extract_final_answer(rec["solution"], ExtractionStrategy.BOXED_LATEX)
    except NoAnswerFound:
        warnings.warn(f"{where}:{line}: solution has no boxed answer; problem will not be scored")
        gold = None
    return Problem(
        id=pid,
        question=rec["problem"],
        origin_id=pid,
        source=Source.MATH,
        gold_reasoning=rec["solution"],
        gold_answer=gold,
        difficulty=difficulty,
        subject=rec.get("type"),
    )


def load_math(path: str | Path) -> list[Problem]:
    """Load competition-math problems.

    Accepts either a JSONL file of {problem, solution, level, type} records or
    the official directory layout (subject folders of one-problem JSON files).
    Gold answers come from the last boxed expression in the solution; problems
    without one stay in the corpus untagged and are excluded from scoring.
    """
    p = Path(path)
    problems: list[Problem] = []
    if p.is_dir():
        for file in sorted(p.rglob("*.json")):
            rel = file.relative_to(p)
            try:
                rec = json.loads(file.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise MalformedRecord(file, 1, f"invalid json: {exc}") from exc
            problems.append(_math_problem(rec, str(rel.with_suffix("")), str(file), 1))
        return problems
    with open(p, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, i, f"invalid json: {exc}") from exc
            pid = rec.get("id", f"math-{len(problems):05d}")
            problems.append(_math_problem(rec, pid, str(path), i))
    return problems


def load_corpus(path: str | Path) -> list[Problem]:
    """Dispatch on layout: directories and {problem, solution} records are
    competition-math, {question, answer} records are gsm-style."""
    p = Path(path)
    if p.is_dir():
        return load_math(p)
    with open(p, encoding="utf-8") as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    if not first:
        return []
    rec = json.loads(first)
    if "question" in rec and "answer" in rec:
        return load_gsm8k(p)
    if "problem" in rec and "solution" in rec:
        return load_math(p)
    raise MalformedRecord(path, 1, "unrecognized corpus record shape")


# --------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class BucketRow:
    kind: str
    value: int
    accuracy: float
    mean_iterations: float
    n: int


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float
    n: int
    mean_iterations: float
    agreed_fraction: float
    exhausted_fraction: float
    failed_fraction: float
    per_bucket: tuple[BucketRow, ...] = ()

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": self.n,
            "mean_iterations": self.mean_iterations,
            "agreed_fraction": self.agreed_fraction,
            "exhausted_fraction": self.exhausted_fraction,
            "failed_fraction": self.failed_fraction,
            "per_bucket": [
                {
                    "kind": row.kind,
                    "value": row.value,
                    "accuracy": row.accuracy,
                    "mean_iterations": row.mean_iterations,
                    "n": row.n,
                }
                for row in self.per_bucket
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "RunMetrics":
        return RunMetrics(
            accuracy=obj["accuracy"],
            n=obj["n"],
            mean_iterations=obj["mean_iterations"],
            agreed_fraction=obj["agreed_fraction"],
            exhausted_fraction=obj["exhausted_fraction"],
            failed_fraction=obj["failed_fraction"],
            per_bucket=tuple(
                BucketRow(b["kind"], b["value"], b["accuracy"], b["mean_iterations"], b["n"])
                for b in obj.get("per_bucket", [])
            ),
        )


def _clamp_bucket(tag: DifficultyTag) -> DifficultyTag:
    if tag.kind == GSM_STEPS:
        lo, hi = GSM_EXPECTED_STEP_RANGE
        clamped = min(max(tag.value, lo), hi)
        if clamped != tag.value:
            return DifficultyTag(GSM_STEPS, clamped)
    return tag


def bucket_by_difficulty(rows: list[tuple[DifficultyTag, bool, int]]) -> tuple[BucketRow, ...]:
    """Aggregate (difficulty, correct, iterations) rows into per-bucket metrics.

    Step counts outside the expected range are clamped into the end buckets so
    every problem lands somewhere.
    """
    grouped: dict[DifficultyTag, list[tuple[bool, int]]] = {}
    for tag, correct, iterations in rows:
        grouped.setdefault(_clamp_bucket(tag), []).append((correct, iterations))
    out = []
    for tag in sorted(grouped):
        members = grouped[tag]
        out.append(
            BucketRow(
                kind=tag.kind,
                value=tag.value,
                accuracy=sum(1 for c, _ in members if c) / len(members),
                mean_iterations=sum(i for _, i in members) / len(members),
                n=len(members),
            )
        )
    return tuple(out)


def score_run(transcripts, problems: list[Problem]) -> RunMetrics:
    """Score one run against its corpus.

    Transcripts and problems must cover exactly the same ids. A transcript is
    correct when its final answer equals the gold under answers_equal; absent
    finals are incorrect. Problems without gold answers are excluded from the
    accuracy denominator with a warning, while mean iterations and the status
    fractions cover every transcript.
    """
    from .interaction import TranscriptStatus  # local to avoid a module cycle

    by_id = {p.id: p for p in problems}
    transcript_ids = [t.problem_id for t in transcripts]
    orphan_transcripts = [tid for tid in transcript_ids if tid not in by_id]
    covered = set(transcript_ids)
    orphan_problems = [p.id for p in problems if p.id not in covered]
    if orphan_transcripts or orphan_problems or len(covered) != len(transcript_ids):
        duplicate = [tid for tid in transcript_ids if transcript_ids.count(tid) > 1]
        raise IdMismatch(orphan_transcripts + duplicate, orphan_problems)

    scorable = 0
    correct_rows: list[tuple[Problem, bool, int]] = []
    correct = 0
    for t in transcripts:
        problem = by_id[t.problem_id]
        if problem.gold_answer is None:
            continue
        scorable += 1
        ok = t.final_answer is not None and answers_equal(t.final_answer, problem.gold_answer)
        correct += int(ok)
        correct_rows.append((problem, ok, t.iterations_used))
    skipped = len(problems) - scorable
    if skipped:
        warnings.warn(f"{skipped} problem(s) lack gold answers and were not scored")

    total = len(transcripts)
    statuses = [t.status for t in transcripts]
    bucket_rows = [
        (p.difficulty, ok, iters) for p, ok, iters in correct_rows if p.difficulty is not None
    ]
    return RunMetrics(
        accuracy=correct / scorable if scorable else 0.0,
        n=scorable,
        mean_iterations=sum(t.iterations_used for t in transcripts) / total if total else 0.0,
        agreed_fraction=statuses.count(TranscriptStatus.AGREED) / total if total else 0.0,
        exhausted_fraction=statuses.count(TranscriptStatus.EXHAUSTED) / total if total else 0.0,
        failed_fraction=statuses.count(TranscriptStatus.BACKEND_FAILED) / total if total else 0.0,
        per_bucket=bucket_by_difficulty(bucket_rows),
    )


# --------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class ReportRow:
    run_id: str
    mode: str
    dataset: str
    metrics: RunMetrics


CSV_COLUMNS = (
    "run_id",
    "mode",
    "dataset",
    "n",
    "accuracy",
    "mean_iterations",
    "agreed_fraction",
    "exhausted_fraction",
)


def render_report(rows: list[ReportRow], out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.csv and report.md; output bytes depend only on the rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    md_path = out / "report.md"

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            m = row.metrics
            writer.writerow(
                [
                    row.run_id,
                    row.mode,
                    row.dataset,
                    m.n,
                    f"{m.accuracy:.4f}",
                    f"{m.mean_iterations:.4f}",
                    f"{m.agreed_fraction:.4f}",
                    f"{m.exhausted_fraction:.4f}",
                ]
            )

    lines = [
        "# Run comparison",
        "",
        "| Mode | Dataset | n | Acc ↑ | # Iter ↓ |",
        "|---|---|---:|---:|---:|",
    ]
    for row in rows:
        m = row.metrics
        lines.append(
            f"| {row.mode} | {row.dataset} | {m.n} | {m.accuracy:.4f} | {m.mean_iterations:.2f} |"
        )
    lines.append("")
    md_path.write_text("\n".join(lines), encoding="utf-8", newline="\n")
    return csv_path, md_path

"""Shared domain model: problems, difficulty tags, adapter roles, run config.

Everything here is an immutable value type. Mutation happens by constructing
new values, which keeps corpus digests and serialized artifacts trustworthy.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from enum import Enum

from .answers import AnswerValue, answer_from_json, answer_to_json
from .errors import EmptyCorpus

__all__ = [
    "AdapterRole",
    "DifficultyTag",
    "FallbackPolicy",
    "InteractionConfig",
    "Knowledge",
    "KnowledgeSet",
    "Problem",
    "Source",
    "ValidationReport",
    "corpus_digest",
    "group_variants",
    "gsm_step_count",
    "problem_from_json",
    "problem_to_json",
    "validate_corpus",
]


class Source(Enum):
    GSM8K = "gsm8k"
    MATH = "math"
    CUSTOM = "custom"


class AdapterRole(Enum):
    """The four adapter lanes a backend can serve.

    IR answers directly, KG writes down the knowledge a problem needs, DR
    reasons on top of that knowledge, and TEACHER only ever appears in the
    augmentation pipeline.
    """

    IR = "ir"
    KG = "kg"
    DR = "dr"
    TEACHER = "teacher"


GSM_STEPS = "gsm-steps"
MATH_LEVEL = "math-level"

# Step counts observed in GSM8K solutions; values outside get a warning, not a rejection.
GSM_EXPECTED_STEP_RANGE = (2, 8)


@dataclass(frozen=True, order=True)
class DifficultyTag:
    kind: str
    value: int

    def __post_init__(self):
        if self.kind == GSM_STEPS:
            if self.value < 1:
                raise ValueError(f"step count must be >= 1, got {self.value}")
            lo, hi = GSM_EXPECTED_STEP_RANGE
            if not lo <= self.value <= hi:
                warnings.warn(
                    f"gsm step count {self.value} outside the expected {lo}..{hi} range",
                    stacklevel=2,
                )
        elif self.kind == MATH_LEVEL:
            if not 1 <= self.value <= 5:
                raise ValueError(f"math level must be in 1..5, got {self.value}")
        else:
            raise ValueError(f"unknown difficulty kind {self.kind!r}")

    @staticmethod
    def gsm_steps(n: int) -> "DifficultyTag":
        return DifficultyTag(GSM_STEPS, n)

    @staticmethod
    def math_level(level: int) -> "DifficultyTag":
        return DifficultyTag(MATH_LEVEL, level)


def gsm_step_count(reasoning: str) -> int:
    """Count reasoning steps as the number of non-empty lines."""
    steps = sum(1 for line in reasoning.splitlines() if line.strip())
    return max(steps, 1)


@dataclass(frozen=True)
class Problem:
    """One question, optionally with its gold solution and a difficulty tag.

    origin_id ties augmented variants back to the problem they were derived
    from; originals carry their own id there.
    """

    id: str
    question: str
    origin_id: str
    source: Source = Source.CUSTOM
    gold_reasoning: str | None = None
    gold_answer: AnswerValue | None = None
    difficulty: DifficultyTag | None = None
    subject: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if not self.question.strip():
            raise ValueError(f"problem {self.id!r} has an empty question")
        if not self.origin_id:
            raise ValueError(f"problem {self.id!r} has an empty origin_id")

    @property
    def is_original(self) -> bool:
        return self.id == self.origin_id


@dataclass(frozen=True)
class Knowledge:
    """General solving knowledge attached to one origin problem."""

    origin_id: str
    text: str

    def __post_init__(self):
        if not self.origin_id:
            raise ValueError("knowledge needs an origin_id")
        if not self.text.strip():
            raise ValueError(f"knowledge for {self.origin_id!r} is empty")


class KnowledgeSet:
    """At most one Knowledge per origin_id."""

    def __init__(self, items: list[Knowledge] | None = None):
        self._by_origin: dict[str, Knowledge] = {}
        for item in items or []:
            self.add(item)

    def add(self, item: Knowledge) -> None:
        if item.origin_id in self._by_origin:
            raise ValueError(f"duplicate knowledge for origin {item.origin_id!r}")
        self._by_origin[item.origin_id] = item

    def get(self, origin_id: str) -> Knowledge | None:
        return self._by_origin.get(origin_id)

    def origin_ids(self) -> set[str]:
        return set(self._by_origin)

    def __len__(self) -> int:
        return len(self._by_origin)

    def __iter__(self):
        return iter(self._by_origin.values())


class FallbackPolicy(Enum):
    """What to answer when the iteration budget runs out without agreement."""

    MAJORITY_UNION = "majority-union"
    MAJORITY_IR = "majority-ir"
    NONE = "none"


@dataclass(frozen=True)
class InteractionConfig:
    """Sampling and loop settings for a run. Defaults are the shipped operating point."""

    threshold: int = 20
    top_p: float = 0.90
    temperature: float = 1.50
    max_tokens: int = 1024
    run_seed: int = 0
    fallback: FallbackPolicy = FallbackPolicy.MAJORITY_UNION
    concurrency_limit: int = 4

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "top_p": self.top_p,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "run_seed": self.run_seed,
            "fallback": self.fallback.value,
            "concurrency_limit": self.concurrency_limit,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "InteractionConfig":
        return InteractionConfig(
            threshold=int(obj["threshold"]),
            top_p=float(obj["top_p"]),
            temperature=float(obj["temperature"]),
            max_tokens=int(obj["max_tokens"]),
            run_seed=int(obj["run_seed"]),
            fallback=FallbackPolicy(obj["fallback"]),
            concurrency_limit=int(obj["concurrency_limit"]),
        )


# --------------------------------------------------------------------------
# corpus operations


@dataclass(frozen=True)
class ValidationReport:
    accepted: bool
    duplicate_ids: tuple[str, ...] = ()
    dangling_origins: tuple[tuple[str, str], ...] = ()  # (problem_id, missing origin_id)
    missing_gold: tuple[str, ...] = ()


def validate_corpus(problems: list[Problem]) -> ValidationReport:
    """Check id uniqueness and origin integrity; missing gold is only a warning.

    A corpus is accepted iff it has no duplicate ids and no origin_id that
    fails to resolve to a problem in the same corpus.
    """
    if not problems:
        raise EmptyCorpus("cannot validate an empty corpus")
    seen: set[str] = set()
    duplicates: list[str] = []
    for p in problems:
        if p.id in seen and p.id not in duplicates:
            duplicates.append(p.id)
        seen.add(p.id)
    ids = {p.id for p in problems}
    dangling = [(p.id, p.origin_id) for p in problems if p.origin_id not in ids]
    missing_gold = [p.id for p in problems if p.gold_answer is None]
    return ValidationReport(
        accepted=not duplicates and not dangling,
        duplicate_ids=tuple(duplicates),
        dangling_origins=tuple(dangling),
        missing_gold=tuple(missing_gold),
    )


def group_variants(problems: list[Problem]) -> dict[str, list[Problem]]:
    """Partition a corpus by origin_id.

    Groups appear in first-seen order; inside a group originals come before
    variants and the input order is otherwise preserved.
    """
    groups: dict[str, list[Problem]] = {}
    for p in problems:
        groups.setdefault(p.origin_id, []).append(p)
    return {
        origin: [p for p in members if p.is_original] + [p for p in members if not p.is_original]
        for origin, members in groups.items()
    }


def problem_to_json(p: Problem) -> dict:
    return {
        "id": p.id,
        "question": p.question,
        "origin_id": p.origin_id,
        "source": p.source.value,
        "gold_reasoning": p.gold_reasoning,
        "gold_answer": answer_to_json(p.gold_answer) if p.gold_answer is not None else None,
        "difficulty": (
            {"kind": p.difficulty.kind, "value": p.difficulty.value}
            if p.difficulty is not None
            else None
        ),
        "subject": p.subject,
    }


def problem_from_json(obj: dict) -> Problem:
    difficulty = obj.get("difficulty")
    gold = obj.get("gold_answer")
    return Problem(
        id=obj["id"],
        question=obj["question"],
        origin_id=obj["origin_id"],
        source=Source(obj.get("source", "custom")),
        gold_reasoning=obj.get("gold_reasoning"),
        gold_answer=answer_from_json(gold) if gold is not None else None,
        difficulty=DifficultyTag(difficulty["kind"], difficulty["value"]) if difficulty else None,
        subject=obj.get("subject"),
    )


def corpus_digest(problems: list[Problem]) -> str:
    """Order-sensitive sha256 over the canonical JSON of every problem."""
    h = hashlib.sha256()
    for p in problems:
        h.update(json.dumps(problem_to_json(p), ensure_ascii=False, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()

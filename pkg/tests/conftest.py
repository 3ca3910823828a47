"""Shared fixtures: the teachers case study texts and small builder helpers."""

import threading

import pytest

from lorid.backend import GenerationResult, HealthState, HealthStatus
from lorid.core import AdapterRole, Problem, Source

# One worked grade-school problem used as golden data across the suite. The
# first sample solution miscounts (treats sick and substitute teachers alike)
# and lands on 60; the second states the governing rules first and lands on 78,
# which matches the reference solution.
CASE_QUESTION = (
    "Last Friday, 13 of the 82 teachers at Rydell Elementary School were sick. "
    "There were 9 substitute teachers called in to help. "
    "How many teachers were at school that day?"
)
CASE_GOLD_REASONING = (
    "There were 82-13=69 regular teachers at school. "
    "If we add the substitute teachers, we find there were 69+9=78 teachers at school that day."
)
CASE_WRONG_SAMPLE = (
    "There were 13 sick teachers and 9 substitute teachers, so there were a total of "
    "13+9=22 teachers not available. Out of the 82 total teachers, 22 were not available, "
    "so there were 82-22=60 teachers at school that day."
)
CASE_RIGHT_SAMPLE = (
    "Subtract the number of incomplete items from the total to find the complete items. "
    "Add the number of additional items to the remaining items to find the total.\n\n"
    "There were 82-13=69 teachers at Rydell Elementary School that day. "
    "In addition to the 69 teachers, there were 9 substitute teachers. "
    "So, the total number of teachers at school that day was 69+9=78."
)
CASE_KNOWLEDGE = (
    "Subtract the number of incomplete items from the total to find the complete items. "
    "Add the number of additional items to the remaining items to find the total."
)


def make_problem(pid, question="What is 2+2?", origin=None, gold_answer=None,
                 gold_reasoning=None, source=Source.CUSTOM, difficulty=None):
    return Problem(
        id=pid,
        question=question,
        origin_id=origin or pid,
        source=source,
        gold_reasoning=gold_reasoning,
        gold_answer=gold_answer,
        difficulty=difficulty,
    )


def write_script(path, records):
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def completion_rec(role, pid, completions, iteration=None):
    rec = {"role": role, "problem_id": pid, "completions": list(completions)}
    rec["iteration"] = iteration
    return rec


def distribution_rec(role, pid, distribution, iteration=None):
    rec = {"role": role, "problem_id": pid, "distribution": [list(d) for d in distribution]}
    rec["iteration"] = iteration
    return rec


class CountingBackend:
    """Wraps any backend and tallies generate calls per role."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = {}
        self._lock = threading.Lock()

    def generate(self, request):
        with self._lock:
            self.calls[request.role] = self.calls.get(request.role, 0) + 1
        return self.inner.generate(request)

    def probe(self, required_roles=()):
        return self.inner.probe(required_roles)

    def describe(self):
        return self.inner.describe()

    def count(self, role=None):
        if role is None:
            return sum(self.calls.values())
        return self.calls.get(role, 0)


class FixedBackend:
    """Duck-typed backend returning one canned text per role; always healthy."""

    def __init__(self, by_role):
        self.by_role = {AdapterRole(k) if isinstance(k, str) else k: v for k, v in by_role.items()}

    def generate(self, request):
        return GenerationResult(text=self.by_role[request.role])

    def probe(self, required_roles=()):
        return HealthStatus(HealthState.READY)

    def describe(self):
        return {"kind": "fixed", "roles": sorted(r.value for r in self.by_role)}


@pytest.fixture
def case_problem():
    from lorid.answers import normalize_answer

    return make_problem(
        "gsm8k-00000",
        question=CASE_QUESTION,
        gold_reasoning=CASE_GOLD_REASONING,
        gold_answer=normalize_answer("78"),
        source=Source.GSM8K,
    )

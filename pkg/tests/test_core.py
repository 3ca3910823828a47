import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorid.answers import AnswerValue
from lorid.core import (
    AdapterRole,
    DifficultyTag,
    FallbackPolicy,
    InteractionConfig,
    Knowledge,
    KnowledgeSet,
    Problem,
    Source,
    corpus_digest,
    group_variants,
    gsm_step_count,
    problem_from_json,
    problem_to_json,
    validate_corpus,
)
from lorid.errors import EmptyCorpus

from conftest import make_problem


# ---------------------------------------------------------------------------
# difficulty


def test_gsm_step_count_ignores_blank_lines():
    assert gsm_step_count("a\n\nb\nc\n") == 3


def test_gsm_step_count_minimum_one():
    assert gsm_step_count("   ") == 1


def test_step_tag_warns_outside_expected_range():
    with pytest.warns(UserWarning):
        DifficultyTag.gsm_steps(9)
    with pytest.warns(UserWarning):
        DifficultyTag.gsm_steps(1)


def test_math_level_rejects_out_of_range():
    with pytest.raises(ValueError):
        DifficultyTag.math_level(6)
    assert DifficultyTag.math_level(3).value == 3


def test_difficulty_ordering():
    assert DifficultyTag.gsm_steps(2) < DifficultyTag.gsm_steps(5)


# ---------------------------------------------------------------------------
# problems and corpus validation


def test_problem_requires_non_empty_fields():
    with pytest.raises(ValueError):
        make_problem("")
    with pytest.raises(ValueError):
        make_problem("p1", question="   ")


def test_is_original():
    assert make_problem("p1").is_original
    assert not make_problem("p1-v1", origin="p1").is_original


def test_validate_accepts_clean_corpus():
    problems = [make_problem("p1"), make_problem("p1-v1", origin="p1")]
    report = validate_corpus(problems)
    assert report.accepted
    assert not report.duplicate_ids
    assert not report.dangling_origins


def test_validate_rejects_duplicates_and_dangling():
    problems = [make_problem("p1"), make_problem("p1"), make_problem("v", origin="ghost")]
    report = validate_corpus(problems)
    assert not report.accepted
    assert "p1" in report.duplicate_ids
    assert ("v", "ghost") in report.dangling_origins


def test_validate_empty_raises():
    with pytest.raises(EmptyCorpus):
        validate_corpus([])


def test_group_variants_originals_first():
    problems = [
        make_problem("a-v1", origin="a"),
        make_problem("a"),
        make_problem("b"),
        make_problem("a-v2", origin="a"),
    ]
    groups = group_variants(problems)
    assert list(groups) == ["a", "b"]
    assert [p.id for p in groups["a"]] == ["a", "a-v1", "a-v2"]
    assert groups["a"][0].is_original


@given(
    st.lists(
        st.tuples(st.integers(min_value=0, max_value=20), st.booleans()),
        min_size=1,
        max_size=40,
    )
)
@settings(max_examples=100)
def test_group_variants_is_a_partition(seeds):
    # Build a corpus where item i is either an original or a variant of some
    # earlier original; grouping must cover every problem exactly once.
    problems = []
    originals = []
    for i, (pick, as_original) in enumerate(seeds):
        if as_original or not originals:
            p = make_problem(f"o{i}")
            originals.append(p.id)
        else:
            p = make_problem(f"v{i}", origin=originals[pick % len(originals)])
        problems.append(p)
    groups = group_variants(problems)
    flattened = [p.id for group in groups.values() for p in group]
    assert sorted(flattened) == sorted(p.id for p in problems)
    for origin, group in groups.items():
        assert all(p.origin_id == origin for p in group)


# ---------------------------------------------------------------------------
# knowledge


def test_knowledge_set_rejects_duplicate_origin():
    ks = KnowledgeSet([Knowledge("p1", "facts")])
    with pytest.raises(ValueError):
        ks.add(Knowledge("p1", "other facts"))
    assert ks.get("p1").text == "facts"
    assert ks.get("missing") is None


def test_knowledge_requires_text():
    with pytest.raises(ValueError):
        Knowledge("p1", "  ")


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_documented_protocol():
    config = InteractionConfig()
    assert config.threshold == 20
    assert config.top_p == 0.90
    assert config.temperature == 1.50
    assert config.fallback is FallbackPolicy.MAJORITY_UNION


def test_config_validation():
    with pytest.raises(ValueError):
        InteractionConfig(threshold=0)
    with pytest.raises(ValueError):
        InteractionConfig(top_p=1.5)
    with pytest.raises(ValueError):
        InteractionConfig(concurrency_limit=0)


def test_config_json_round_trip():
    config = InteractionConfig(threshold=5, run_seed=7, fallback=FallbackPolicy.MAJORITY_IR)
    assert InteractionConfig.from_json_dict(config.to_json_dict()) == config


# ---------------------------------------------------------------------------
# serialization and digests


def test_problem_json_round_trip():
    p = make_problem(
        "gsm8k-00003",
        question="How many?",
        gold_answer=AnswerValue.from_rational(4),
        gold_reasoning="2+2=4",
        source=Source.GSM8K,
        difficulty=DifficultyTag.gsm_steps(2),
    )
    assert problem_from_json(problem_to_json(p)) == p


def test_problem_json_is_plain_data():
    obj = problem_to_json(make_problem("p1"))
    json.dumps(obj)  # must not need custom encoders


def test_corpus_digest_is_order_sensitive_and_content_sensitive():
    a, b = make_problem("p1"), make_problem("p2")
    assert corpus_digest([a, b]) != corpus_digest([b, a])
    assert corpus_digest([a]) != corpus_digest([make_problem("p1", question="Else?")])
    assert corpus_digest([a, b]) == corpus_digest([a, b])


def test_adapter_role_values():
    assert {r.value for r in AdapterRole} == {"ir", "kg", "dr", "teacher"}

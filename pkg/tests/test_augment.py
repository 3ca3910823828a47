import json

import pytest

from lorid.answers import AnswerValue, normalize_answer
from lorid.augment import (
    KNOWLEDGE_INSTRUCTION,
    build_knowledge_prompt,
    compose_dr_input,
    compose_solution,
    emit_sft_datasets,
    generate_knowledge,
    load_knowledge,
    load_variants,
    save_knowledge,
    share_knowledge,
)
from lorid.backend import ScriptTable, ScriptedBackend
from lorid.core import AdapterRole, Knowledge, KnowledgeSet, Source
from lorid.errors import MalformedRecord, MissingGold, MissingKnowledge

from conftest import (
    CASE_GOLD_REASONING,
    CASE_KNOWLEDGE,
    CASE_QUESTION,
    CountingBackend,
    FixedBackend,
    completion_rec,
    make_problem,
)


def gold_problem(pid, origin=None, question=None, answer="4"):
    return make_problem(
        pid,
        question=question or f"Question text for {pid}?",
        origin=origin,
        gold_reasoning=f"step one\nstep two for {origin or pid}",
        gold_answer=normalize_answer(answer),
    )


# ---------------------------------------------------------------------------
# prompt construction


def test_prompt_embeds_question_reasoning_and_answer(case_problem):
    prompt = build_knowledge_prompt(case_problem)
    text = prompt.render()
    assert text.startswith(KNOWLEDGE_INSTRUCTION)
    assert CASE_QUESTION in text
    assert "There were 82-13=69 regular teachers" in text
    assert text.rstrip().endswith("78")
    assert "Question:\n" in text and "Reasoning:\n" in text and "Answer:\n" in text


def test_prompt_requires_gold():
    with pytest.raises(MissingGold):
        build_knowledge_prompt(make_problem("p1"))


def test_compose_dr_input_format():
    assert compose_dr_input("Q?", "K.") == "Question: Q?\nKnowledge: K."


def test_compose_solution_appends_delimited_answer():
    out = compose_solution("a\nb\n", AnswerValue.from_rational(7))
    assert out == "a\nb\n#### 7"


# ---------------------------------------------------------------------------
# knowledge store


def test_save_load_round_trip_sorted(tmp_path):
    path = tmp_path / "knowledge.jsonl"
    ks = KnowledgeSet([Knowledge("b", "beta"), Knowledge("a", "alpha")])
    save_knowledge(path, ks)
    lines = path.read_text().splitlines()
    assert [json.loads(l)["origin_id"] for l in lines] == ["a", "b"]
    back = load_knowledge(path)
    assert back.get("a").text == "alpha"
    assert len(back) == 2


def test_load_knowledge_reports_bad_line(tmp_path):
    path = tmp_path / "knowledge.jsonl"
    path.write_text('{"origin_id": "a", "text": "ok"}\nnot json\n')
    with pytest.raises(MalformedRecord) as excinfo:
        load_knowledge(path)
    assert ":2" in str(excinfo.value)


# ---------------------------------------------------------------------------
# teacher generation


def teacher_backend(origins):
    records = [
        completion_rec("teacher", origin, [f"knowledge for {origin}"], iteration=0)
        for origin in origins
    ]
    return ScriptedBackend(ScriptTable.from_records(records))


def test_generate_knowledge_one_call_per_origin(tmp_path):
    originals = [gold_problem(f"p{i}") for i in range(4)]
    backend = CountingBackend(teacher_backend([p.id for p in originals]))
    ks = generate_knowledge(originals, backend, checkpoint_path=tmp_path / "k.jsonl")
    assert len(ks) == 4
    assert backend.count(AdapterRole.TEACHER) == 4
    assert ks.get("p2").text == "knowledge for p2"


def test_generate_knowledge_requires_gold():
    with pytest.raises(MissingGold) as excinfo:
        generate_knowledge([make_problem("p1")], teacher_backend(["p1"]))
    assert "p1" in str(excinfo.value)


def test_generate_knowledge_rejects_duplicate_origins():
    problems = [gold_problem("p1"), gold_problem("p1-v", origin="p1")]
    with pytest.raises(ValueError):
        generate_knowledge(problems, teacher_backend(["p1"]))


def test_generate_knowledge_resumes_from_checkpoint(tmp_path):
    originals = [gold_problem(f"p{i}") for i in range(4)]
    path = tmp_path / "k.jsonl"
    save_knowledge(path, KnowledgeSet([Knowledge("p0", "already done"), Knowledge("p2", "too")]))
    backend = CountingBackend(teacher_backend([p.id for p in originals]))
    ks = generate_knowledge(originals, backend, checkpoint_path=path)
    assert backend.count(AdapterRole.TEACHER) == 2  # only p1 and p3 requested
    assert ks.get("p0").text == "already done"
    assert ks.get("p1").text == "knowledge for p1"
    # the checkpoint now holds all four
    assert load_knowledge(path).origin_ids() == {"p0", "p1", "p2", "p3"}


def test_generate_knowledge_skips_failed_origins(tmp_path):
    originals = [gold_problem("p0"), gold_problem("p1")]
    backend = teacher_backend(["p0"])  # p1 will miss
    ks = generate_knowledge(originals, backend, checkpoint_path=tmp_path / "k.jsonl")
    assert ks.origin_ids() == {"p0"}


def test_generate_knowledge_skips_empty_teacher_output():
    originals = [gold_problem("p0")]
    ks = generate_knowledge(originals, FixedBackend({"teacher": "   "}))
    assert len(ks) == 0


# ---------------------------------------------------------------------------
# sharing and emission


def family(n_origins=2, n_variants=2):
    problems = []
    for i in range(n_origins):
        origin = f"p{i}"
        problems.append(gold_problem(origin))
        for v in range(n_variants):
            problems.append(gold_problem(f"{origin}-v{v}", origin=origin))
    return problems


def test_share_knowledge_pairs_variants_with_origin_knowledge():
    problems = family()
    ks = KnowledgeSet([Knowledge("p0", "k0"), Knowledge("p1", "k1")])
    pairs = share_knowledge(problems, ks)
    assert len(pairs) == len(problems)
    for problem, knowledge in pairs:
        assert knowledge.origin_id == problem.origin_id


def test_share_knowledge_missing_origin_raises():
    with pytest.raises(MissingKnowledge):
        share_knowledge([gold_problem("p0")], KnowledgeSet())


def test_emit_writes_three_aligned_files(tmp_path):
    problems = family()
    ks = KnowledgeSet([Knowledge("p0", "k0"), Knowledge("p1", "k1")])
    paths = emit_sft_datasets(share_knowledge(problems, ks), tmp_path)
    rows = {role: [json.loads(l) for l in paths[role].read_text().splitlines()] for role in paths}
    assert all(len(r) == 6 for r in rows.values())
    for i, problem in enumerate(problems):
        ir, kg, dr = rows[AdapterRole.IR][i], rows[AdapterRole.KG][i], rows[AdapterRole.DR][i]
        assert ir["role"] == "IR" and kg["role"] == "KG" and dr["role"] == "DR"
        assert ir["input"] == problem.question
        assert ir["output"].endswith("#### 4")
        assert kg["input"] == problem.question
        assert kg["output"] == ks.get(problem.origin_id).text
        assert dr["input"] == compose_dr_input(problem.question, kg["output"])
        assert dr["output"] == ir["output"]
        assert ir["origin_id"] == problem.origin_id
    # sharing invariant: same origin, same knowledge text everywhere
    by_origin = {}
    for row in rows[AdapterRole.KG]:
        by_origin.setdefault(row["origin_id"], set()).add(row["output"])
    assert all(len(texts) == 1 for texts in by_origin.values())


def test_emit_record_key_order_is_stable(tmp_path):
    problems = [gold_problem("p0")]
    ks = KnowledgeSet([Knowledge("p0", "k0")])
    paths = emit_sft_datasets(share_knowledge(problems, ks), tmp_path)
    line = paths[AdapterRole.IR].read_text().splitlines()[0]
    assert list(json.loads(line)) == ["role", "input", "output", "origin_id"]


def test_emit_requires_gold_before_writing(tmp_path):
    pairs = [(make_problem("p0"), Knowledge("p0", "k"))]
    with pytest.raises(MissingGold):
        emit_sft_datasets(pairs, tmp_path / "out")
    assert not (tmp_path / "out" / "ir.jsonl").exists()


def test_dr_training_input_matches_inference_composition(case_problem):
    # The DR adapter is trained on exactly the prompt the loop sends it.
    ks = KnowledgeSet([Knowledge(case_problem.id, CASE_KNOWLEDGE)])
    pairs = share_knowledge([case_problem], ks)
    record = None
    import lorid.augment as augment_mod

    record = augment_mod._sft_records(pairs[0])[AdapterRole.DR]
    assert record.input == compose_dr_input(case_problem.question, CASE_KNOWLEDGE)
    assert record.input.startswith("Question: Last Friday")
    assert CASE_GOLD_REASONING in record.output


# ---------------------------------------------------------------------------
# variant loading


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


def test_load_variants_by_origin_id(tmp_path):
    base = [gold_problem("p0"), gold_problem("p1")]
    path = tmp_path / "variants.jsonl"
    write_jsonl(
        path,
        [
            {"question": "v one?", "answer": "a\n#### 5", "origin_id": "p0"},
            {"query": "v two?", "response": "b\n#### 6", "origin_id": "p1"},
        ],
    )
    variants = load_variants(path, base)
    assert [v.origin_id for v in variants] == ["p0", "p1"]
    assert all(not v.is_original for v in variants)
    assert variants[0].gold_answer.rational == 5
    assert variants[1].question == "v two?"
    assert variants[1].gold_answer.rational == 6


def test_load_variants_falls_back_to_question_match(tmp_path):
    base = [gold_problem("p0", question="Original question zero?")]
    path = tmp_path / "variants.jsonl"
    write_jsonl(
        path,
        [
            {
                "question": "Rephrased question?",
                "answer": "#### 9",
                "original_question": "Original question zero?",
            }
        ],
    )
    variants = load_variants(path, base)
    assert variants[0].origin_id == "p0"


def test_load_variants_unresolvable_rows_collected(tmp_path):
    base = [gold_problem("p0")]
    path = tmp_path / "variants.jsonl"
    write_jsonl(
        path,
        [
            {"question": "fine", "answer": "#### 1", "origin_id": "p0"},
            {"question": "orphan", "answer": "#### 2"},
            {"question": "ghost origin", "answer": "#### 3", "origin_id": "nope"},
        ],
    )
    with pytest.raises(MalformedRecord) as excinfo:
        load_variants(path, base)
    message = str(excinfo.value)
    assert "2" in message or "3" in message


def test_loaded_variants_validate_against_base(tmp_path):
    from lorid.core import validate_corpus

    base = [gold_problem("p0")]
    path = tmp_path / "variants.jsonl"
    write_jsonl(path, [{"question": "v?", "answer": "#### 1", "origin_id": "p0"}])
    merged = base + load_variants(path, base)
    assert validate_corpus(merged).accepted

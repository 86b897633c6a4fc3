from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vera.errors import ConfigurationError, ContractViolationError, StageError
from vera.gateway import Gateway, MockBackend, ModelProfile
from vera.metrics import CANNOT_ANSWER
from vera.pipeline import (
    AtomicStatement,
    PipelineResult,
    QueryCase,
    Vera,
    adherence_score,
    join_statements,
    rejudge,
    response_adherence,
    response_relevance,
    retrieval_relevance,
)
from vera.prompts import ADHERENCE_CLASSES
from vera.retriever import ContextBundle, count_tokens
from vera.scripted import ScriptedWorld

from conftest import COUNTRIES

WW2 = "What were the causes of World War II?"


def make_vera(world, index=None, **kw):
    gw = Gateway()
    gen, ev = world.install(gw)
    return Vera(gw, gen, ev, index=index, **kw), gw, gen


def words(n: int, start: int = 0) -> str:
    return " ".join(f"w{i}" for i in range(start, start + n))


# --- closed-form scores ----------------------------------------------------


def test_score_formulas():
    assert retrieval_relevance(160, 512) == 0.3125
    assert response_relevance([1, 1, 0, 1]) == 0.75
    assert response_adherence(["directly_derivable", "logically_inferable", "not_grounded"]) == pytest.approx(2 / 3, abs=1e-12)
    assert [adherence_score(c) for c in ADHERENCE_CLASSES] == [1, 1, 0]
    with pytest.raises(ValueError):
        retrieval_relevance(0, 0)
    with pytest.raises(ValueError):
        response_relevance([])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=60))
def test_relevance_matches_fraction_oracle(r):
    assert abs(response_relevance(r) - float(Fraction(sum(r), len(r)))) <= 1e-12


@given(st.integers(1, 5000).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_retrieval_ratio_in_unit_interval(pair):
    kept, total = pair
    assert 0.0 <= retrieval_relevance(kept, total) <= 1.0


def test_join_statements():
    assert join_statements([" A. ", "", "B."]) == "A. B."


def test_statement_invariants():
    s = AtomicStatement(0, "x", adherence_class="not_grounded", g_score=1)
    with pytest.raises(ContractViolationError):
        s.check()
    s = AtomicStatement(0, "x", adherence_class="not_grounded", g_score=0, edit_action="rewrite", rewritten_text="x")
    with pytest.raises(ContractViolationError):
        s.check()
    assert AtomicStatement(0, "x", edit_action="remove").surviving_text is None


# --- stage 1 ---------------------------------------------------------------


def test_needs_retrieval_scripted():
    vera, _, _ = make_vera(ScriptedWorld(chit_chat={"Say hello."}))
    traces = []
    assert vera.needs_retrieval(QueryCase("q", WW2), traces) is True
    assert vera.needs_retrieval(QueryCase("q", "Say hello."), traces) is False
    assert traces[0].verdict.rationale == "scripted"


def test_needs_retrieval_malformed_thrice():
    vera, gw, _ = make_vera(ScriptedWorld(malformed_stages={"malformed"}))
    with pytest.raises(StageError):
        vera.needs_retrieval(QueryCase("q", WW2))
    assert gw.call_count(vera.evaluator) == 3


def test_retrieval_skipped_has_no_context_metrics():
    world = ScriptedWorld(chit_chat={"Say hello."}, answers={"Say hello.": "Hello there, friend."})
    vera, _, _ = make_vera(world)
    res = vera.run_pipeline(QueryCase("q", "Say hello."))
    assert not res.retrieval_used and res.context is None
    assert res.metrics.context_relevance is None and res.metrics.response_adherence is None
    assert res.final_response == "Hello there, friend."
    gen_prompt = next(t for t in res.traces if t.stage == "answer_generation").exchanges[0].request[-1][1]
    assert "Context:" not in gen_prompt


# --- stage 2 ---------------------------------------------------------------


def test_context_edit_ratio_0_3125():
    q = QueryCase("q", "Which words matter?")
    ctx = ContextBundle.from_text("q", words(512))
    assert ctx.original_token_count == 512
    vera, _, _ = make_vera(ScriptedWorld(context_edits={q.question: words(160, 100)}))
    traces = []
    out = vera.evaluate_and_edit_context(q, ctx, traces)
    assert out.edited_token_count == 160
    assert traces[0].scores["R_retrieval"] == 0.3125
    assert ctx.edited_text is None  # input left untouched


def test_context_echo_is_one():
    q = QueryCase("q", "Echo?")
    text = words(40)
    vera, _, _ = make_vera(ScriptedWorld(context_edits={q.question: text}))
    out = vera.evaluate_and_edit_context(q, ContextBundle.from_text("q", text))
    assert retrieval_relevance(out.edited_token_count, out.original_token_count) == 1.0


def test_context_edit_longer_is_contract_violation():
    q = QueryCase("q", "Grow?")
    vera, _, _ = make_vera(ScriptedWorld(context_edits={q.question: words(41)}))
    with pytest.raises(ContractViolationError):
        vera.evaluate_and_edit_context(q, ContextBundle.from_text("q", words(40)))
    res = vera.run_pipeline(q, context=ContextBundle.from_text("q", words(40)))
    assert res.halted and res.error_stage == "context_edit"
    assert "context_edit" in res.halt_reason


def test_halt_on_empty_edit(country_index):
    q = QueryCase("q", WW2)
    vera, gw, gen = make_vera(ScriptedWorld(context_edits={WW2: ""}), index=country_index)
    res = vera.run_pipeline(q)
    assert res.halted and res.error_stage is None
    assert res.final_response == CANNOT_ANSWER == "Query cannot be answered with retrieved context"
    assert res.metrics.context_relevance == 0.0
    assert gw.call_count(gen) == 0 and res.generator_calls() == 0


# --- generation ------------------------------------------------------------


def test_generate_identity():
    gw = Gateway()
    gw.register_mock("g", MockBackend([(r".*", "A1")]))
    vera = Vera(gw, ModelProfile("g", "generator", "mock:g"), ModelProfile("e", "evaluator", "mock:g"))
    assert vera.generate_response(QueryCase("q", "Q?"), None) == "A1"


def test_generate_live_without_key(monkeypatch):
    monkeypatch.delenv("VERA_NOPE", raising=False)
    live = ModelProfile("g", "generator", "https://api.example.invalid/v1", api_key_env="VERA_NOPE")
    vera = Vera(Gateway(), live, live.__class__("e", "evaluator", "mock:x"))
    with pytest.raises(ConfigurationError):
        vera.generate_response(QueryCase("q", "Q?"), None)


# --- stage 3 ---------------------------------------------------------------


def test_split_two_claims_and_one():
    gw = Gateway()
    gw.register_mock("e", MockBackend([
        (r"2\.1 million", json.dumps({"statements": ["Paris is the capital of France.", "Paris has 2.1 million residents."]})),
        (r".*", json.dumps({"statements": ["Paris is the capital of France."]})),
    ]))
    prof = ModelProfile("e", "evaluator", "mock:e")
    vera = Vera(gw, prof, prof)
    two = vera.split_atomic_statements("Paris is the capital of France and has 2.1 million residents.")
    assert [s.index for s in two] == [0, 1]
    assert len(vera.split_atomic_statements("Paris is the capital of France.")) == 1
    with pytest.raises(ValueError):
        vera.split_atomic_statements("   ")


def test_split_zero_statements_is_stage_error():
    gw = Gateway()
    gw.register_mock("e", MockBackend([(r".*", '{"statements": []}')]))
    prof = ModelProfile("e", "evaluator", "mock:e")
    with pytest.raises(StageError):
        Vera(gw, prof, prof).split_atomic_statements("Something.")


class LabelJudge:
    """Evaluator that answers judge stages from fixed label vectors."""

    def __init__(self, relevance=(), classes=(), edits=()):
        self.relevance, self.classes, self.edits = list(relevance), list(classes), list(edits)
        self.backend = MockBackend([
            (lambda m: "Statements judged not grounded:" in m[-1][1], self._edit),
            (lambda m: "Statements:" in m[-1][1] and "Query:" in m[-1][1], lambda m: self._judgments(self.relevance)),
            (lambda m: "Statements:" in m[-1][1], lambda m: self._judgments(self.classes)),
            (lambda m: "Response:" in m[-1][1], self._split),
            (lambda m: "Context:" in m[-1][1], self._echo_context),
            (lambda m: True, lambda m: '{"knowledge_intensive": true}'),
        ])

    @staticmethod
    def _judgments(labels):
        return json.dumps({"judgments": [{"index": i, "label": lab} for i, lab in enumerate(labels, 1)]})

    @staticmethod
    def _split(m):
        text = m[-1][1].split("Response:\n", 1)[1]
        return json.dumps({"statements": [s + "." for s in text.rstrip(".").split(". ")]})

    @staticmethod
    def _echo_context(m):
        ctx = m[-1][1].split("Context:\n", 1)[1]
        return json.dumps({"edited_context": ctx})

    def _edit(self, m):
        out = []
        for i, e in enumerate(self.edits, 1):
            item = {"index": i, "label": "rewrite" if e else "remove"}
            if e:
                item["rewritten_text"] = e
            out.append(item)
        return json.dumps({"judgments": out})


def judge_vera(judge: LabelJudge, answer: str):
    gw = Gateway()
    gw.register_mock("e", judge.backend)
    gw.register_mock("g", MockBackend([(r".*", answer)]))
    return Vera(gw, ModelProfile("g", "generator", "mock:g"), ModelProfile("e", "evaluator", "mock:e")), gw


def stmts(n):
    return [AtomicStatement(i, f"S{i}.") for i in range(n)]


def test_relevancy_0_75_and_edit():
    vera, _ = judge_vera(LabelJudge(relevance=[1, 1, 0, 1]), "")
    traces = []
    edited, score = vera.evaluate_and_edit_relevancy(stmts(4), QueryCase("q", "Q?"), traces)
    assert score == 0.75 and traces[0].scores["R_response"] == 0.75
    assert edited == "S0. S1. S3."


def test_relevancy_all_relevant_identity():
    vera, _ = judge_vera(LabelJudge(relevance=[1, 1, 1]), "")
    edited, score = vera.evaluate_and_edit_relevancy(stmts(3), QueryCase("q", "Q?"))
    assert score == 1.0 and edited == "S0. S1. S2."


def test_relevancy_label_outside_binary():
    vera, _ = judge_vera(LabelJudge(relevance=[1, 2]), "")
    with pytest.raises(StageError):
        vera.judge_relevancy(stmts(2), QueryCase("q", "Q?"))


def test_all_irrelevant_emits_cannot_answer():
    vera, _ = judge_vera(LabelJudge(relevance=[0, 0]), "A. B.")
    res = vera.run_pipeline(QueryCase("q", "Q?"), context=ContextBundle.from_text("q", "Some context."))
    assert res.metrics.response_relevance == 0.0
    assert res.relevancy_edited_response == ""
    assert res.final_response == CANNOT_ANSWER and not res.halted
    assert res.metrics.response_adherence is None


# --- stage 4 ---------------------------------------------------------------


CTX = ContextBundle.from_text("q", "Paris is the capital of France.")


def test_adherence_two_thirds():
    vera, _ = judge_vera(LabelJudge(classes=["CLASS_1", "CLASS_2", "CLASS_3"], edits=[None]), "")
    s = stmts(3)
    final, score = vera.evaluate_and_edit_adherence(s, CTX)
    assert score == pytest.approx(2 / 3, abs=1e-12)
    assert [x.g_score for x in s] == [1, 1, 0]
    assert [x.edit_action for x in s] == ["keep", "keep", "remove"]
    assert final == "S0. S1."


def test_adherence_all_derivable_identity():
    vera, gw = judge_vera(LabelJudge(classes=["directly_derivable"] * 2), "")
    final, score = vera.evaluate_and_edit_adherence(stmts(2), CTX)
    assert score == 1.0 and final == "S0. S1."


def test_rewrite_survives_but_scores_zero():
    vera, _ = judge_vera(LabelJudge(classes=["directly_derivable", "not_grounded"], edits=["Paris is the capital."]), "")
    s = stmts(2)
    final, score = vera.evaluate_and_edit_adherence(s, CTX)
    assert final == "S0. Paris is the capital."
    assert score == 0.5 and s[1].g_score == 0 and s[1].edit_action == "rewrite"


def test_adherence_label_outside_taxonomy():
    vera, _ = judge_vera(LabelJudge(classes=["mostly"]), "")
    with pytest.raises(StageError):
        vera.judge_adherence(stmts(1), "ctx")


def test_rewrite_identical_to_original_is_contract_violation():
    vera, _ = judge_vera(LabelJudge(classes=["not_grounded"], edits=["S0."]), "")
    with pytest.raises(ContractViolationError):
        vera.evaluate_and_edit_adherence(stmts(1), CTX)


# --- composition -----------------------------------------------------------


def test_with_vera_end_to_end_scores(country_index):
    name, capital, _ = COUNTRIES[0]
    q = QueryCase("cap-00", f"What is the capital of {name}?")
    vera, gw, gen = make_vera(ScriptedWorld(answers={
        q.question: f"The capital of {name} is {capital}. Cats are popular pets. The capital of {name} is Nowhere City."
    }), index=country_index)
    res = vera.run_pipeline(q)
    m = res.metrics
    assert res.retrieval_used and not res.halted and not res.failed
    assert 0 < m.context_relevance < 1
    assert m.response_relevance == pytest.approx(2 / 3)
    assert m.response_adherence == 0.5
    assert res.final_response == f"The capital of {name} is {capital}. The capital of {name} is {capital}."
    assert "Cats" not in res.relevancy_edited_response
    assert gw.call_count(gen) == 1
    stages = [t.stage for t in res.traces]
    assert stages == ["requirement_check", "context_edit", "answer_generation", "statement_split",
                      "relevancy_judge", "adherence_judge", "adherence_edit"]
    assert all(t.applied for t in res.traces)
    restored = PipelineResult.from_dict(json.loads(json.dumps(res.to_dict())))
    assert restored.metrics == res.metrics and restored.final_response == res.final_response


def test_without_vera_audit_only(country_index):
    name, capital, _ = COUNTRIES[0]
    q = QueryCase("cap-00", f"What is the capital of {name}?")
    vera, _, _ = make_vera(ScriptedWorld(answers={q.question: f"The capital of {name} is {capital}. Cats are pets."}),
                           index=country_index)
    res = vera.run_pipeline(q, "without_vera")
    assert res.final_response == res.raw_response == res.relevancy_edited_response
    assert res.context.edited_text is None
    assert res.metrics.response_relevance == 0.5
    assert res.metrics.context_relevance is not None and res.metrics.response_adherence == 0.5
    audit = [t for t in res.traces if t.stage != "answer_generation"]
    assert audit and not any(t.applied for t in audit)
    assert "requirement_check" not in [t.stage for t in res.traces]

    plain, _, _ = make_vera(ScriptedWorld(), index=country_index, audit=False)
    res2 = plain.run_pipeline(q, "without_vera")
    assert res2.metrics.response_relevance is None and len(res2.traces) == 1


def test_missing_index_is_stage_failure():
    vera, _, _ = make_vera(ScriptedWorld())
    res = vera.run_pipeline(QueryCase("q", WW2))
    assert res.halted and res.failed


def test_unknown_mode():
    vera, _, _ = make_vera(ScriptedWorld())
    with pytest.raises(ValueError):
        vera.run_pipeline(QueryCase("q", "Q?"), "sometimes")


# --- properties ------------------------------------------------------------


@st.composite
def labelled_run(draw):
    n = draw(st.integers(1, 8))
    relevance = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    kept = sum(relevance)
    classes = draw(st.lists(st.sampled_from(ADHERENCE_CLASSES), min_size=kept, max_size=kept))
    bad = sum(c == "not_grounded" for c in classes)
    edits = draw(st.lists(st.one_of(st.none(), st.sampled_from(["Fixed one.", "Fixed two."])), min_size=bad, max_size=bad))
    return n, relevance, classes, edits


@settings(max_examples=80, deadline=None)
@given(labelled_run())
def test_edit_soundness_property(run):
    n, relevance, classes, edits = run
    answer = " ".join(f"Claim {i}." for i in range(n))
    vera, gw = judge_vera(LabelJudge(relevance, classes, edits), answer)
    res = vera.run_pipeline(QueryCase("q", "Q?"), context=ContextBundle.from_text("q", "Some context here."))
    m = res.metrics
    assert not res.failed
    assert m.context_relevance == 1.0
    assert abs(m.response_relevance - sum(relevance) / n) <= 1e-12
    relevant_text = res.relevancy_edited_response
    for s in res.statements:
        if s.relevance == 0:
            assert s.text not in relevant_text and s.text not in res.final_response
    if not any(relevance):
        assert res.final_response == CANNOT_ANSWER and m.response_adherence is None
        return
    kept = [s for s in res.statements if s.relevance == 1]
    assert abs(m.response_adherence - sum(adherence_score(c) for c in classes) / len(kept)) <= 1e-12
    surviving = []
    for s in kept:
        s.check()
        assert (s.g_score == 1) == (s.adherence_class != "not_grounded")
        if s.adherence_class == "not_grounded" and s.edit_action == "remove":
            assert s.text not in res.final_response
        if s.surviving_text:
            surviving.append(s.surviving_text)
    expected = " ".join(surviving) or CANNOT_ANSWER
    assert res.final_response == expected  # order preserved
    for v in (m.context_relevance, m.response_relevance, m.response_adherence):
        assert 0.0 <= v <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(range(len(COUNTRIES))), st.booleans())
def test_scripted_runs_are_idempotent(country_index, i, capital_q):
    name, capital, export = COUNTRIES[i]
    question = f"What is the capital of {name}?" if capital_q else f"What is the main export of {name}?"
    q = QueryCase("q", question)
    from conftest import scripted_answers

    vera, _, _ = make_vera(ScriptedWorld(answers=scripted_answers()), index=country_index)
    res = vera.run_pipeline(q)
    assert not res.failed
    assert res.context.edited_token_count <= res.context.original_token_count
    if res.final_response == CANNOT_ANSWER:
        return
    r, a = rejudge(vera, res, q)
    assert r == 1.0 and a == 1.0
    assert count_tokens(res.context.edited_text) == res.context.edited_token_count

from __future__ import annotations

import shutil

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vera.errors import ConfigurationError, ParseError, RenderError, StageError
from vera.gateway import Gateway, MockBackend, ModelProfile
from vera.prompts import (
    ADHERENCE_CLASSES,
    REASK_REMINDER,
    TEMPLATE_DIR,
    PromptTemplate,
    Stage,
    StatementLabel,
    TemplateSet,
    ask,
    format_output,
    parse_verdict,
    render,
)


def simple_template(text="Query: {query}", stage=Stage.REQUIREMENT_CHECK, shots=()):
    return PromptTemplate(stage, text, "system", shots)


def test_render_substitutes_once_at_site():
    msgs = render(simple_template(), {"query": "Q1"})
    assert msgs[-1] == ("user", "Query: Q1")
    assert sum(m[1].count("Q1") for m in msgs) == 1


def test_render_is_deterministic(templates):
    b = {"query": "q", "context": "c {query} stays literal"}
    assert render(templates[Stage.CONTEXT_EDIT], b) == render(templates[Stage.CONTEXT_EDIT], b)
    assert "c {query} stays literal" in render(templates[Stage.CONTEXT_EDIT], b)[-1][1]


def test_render_missing_placeholder_names_it(templates):
    with pytest.raises(RenderError) as err:
        render(templates[Stage.CONTEXT_EDIT], {"query": "q"})
    assert err.value.placeholder == "context"
    assert "context" in str(err.value)


def test_few_shots_precede_live_instance(templates):
    t = templates[Stage.RELEVANCY_JUDGE]
    msgs = render(t, {"query": "LIVE", "statements": "[1] s"})
    assert msgs[0][0] == "system"
    roles = [r for r, _ in msgs[1:]]
    assert roles == ["user", "assistant"] * len(t.few_shot_examples) + ["user"]
    assert "LIVE" in msgs[-1][1]


def test_reasoning_stages_ask_for_rationale(templates):
    for stage in (Stage.REQUIREMENT_CHECK, Stage.CONTEXT_EDIT, Stage.RELEVANCY_JUDGE,
                  Stage.ADHERENCE_JUDGE, Stage.ADHERENCE_EDIT, Stage.ANSWER_GRADING):
        assert "rationale" in templates[stage].system_text


def test_template_missing_required_placeholder():
    with pytest.raises(ConfigurationError):
        PromptTemplate(Stage.CONTEXT_EDIT, "Query: {query}")


def test_template_few_shot_must_validate():
    with pytest.raises(ConfigurationError):
        PromptTemplate(Stage.RELEVANCY_JUDGE, "{query} {statements}", "", (({"query": "q", "statements": "s"}, [{"index": 1, "label": 7}]),))


def test_every_stage_has_two_or_more_shots(templates):
    for stage in Stage:
        assert len(templates[stage].few_shot_examples) >= 2


def test_template_set_hash_tracks_files(tmp_path, templates):
    shutil.copytree(TEMPLATE_DIR, tmp_path / "t")
    assert TemplateSet.load(tmp_path / "t").hash == templates.hash
    p = tmp_path / "t" / "requirement_check.yaml"
    p.write_text(p.read_text() + "\n# edited\n")
    assert TemplateSet.load(tmp_path / "t").hash != templates.hash
    (tmp_path / "t" / "statement_split.yaml").unlink()
    with pytest.raises(ConfigurationError):
        TemplateSet.load(tmp_path / "t")


# --- parsing -------------------------------------------------------------


def test_adherence_class_labels():
    raw = 'Reasoning first. {"judgments": [{"index": 1, "rationale": "stated", "label": "CLASS_1"}]} trailing'
    v = parse_verdict(Stage.ADHERENCE_JUDGE, raw)
    assert v.payload == [StatementLabel(1, "directly_derivable", "stated")]
    for alias, cls in [("class_2", "logically_inferable"), ("Not Grounded", "not_grounded"), ("3", "not_grounded")]:
        raw = '{"judgments": [{"index": 1, "label": "%s"}]}' % alias
        assert parse_verdict(Stage.ADHERENCE_JUDGE, raw).payload[0].label == cls


def test_adherence_label_outside_taxonomy():
    with pytest.raises(ParseError):
        parse_verdict(Stage.ADHERENCE_JUDGE, '{"judgments": [{"index": 1, "label": "partially"}]}')


@pytest.mark.parametrize("raw, expected", [("yes", True), ("Yes.", True), ("no", False), ("FALSE", False)])
def test_requirement_check_bare_words(raw, expected):
    assert parse_verdict(Stage.REQUIREMENT_CHECK, raw).payload is expected


def test_requirement_check_json_with_prose():
    raw = 'Sure.\n```json\n{"rationale": "needs facts", "knowledge_intensive": true}\n```'
    v = parse_verdict(Stage.REQUIREMENT_CHECK, raw)
    assert v.payload is True and v.rationale == "needs facts"


@pytest.mark.parametrize(
    "stage, raw",
    [
        (Stage.REQUIREMENT_CHECK, "maybe, it depends"),
        (Stage.RELEVANCY_JUDGE, '{"judgments": [{"index": 1, "label": 2}]}'),
        (Stage.RELEVANCY_JUDGE, '{"judgments": [{"index": 1, "label": true}]}'),
        (Stage.STATEMENT_SPLIT, '{"statements": "not a list"}'),
        (Stage.CONTEXT_EDIT, '{"edited_context": '),
        (Stage.ANSWER_GRADING, "looks right to me"),
        (Stage.ADHERENCE_EDIT, '{"judgments": [{"index": 1, "label": "shorten"}]}'),
    ],
)
def test_malformed_blocks(stage, raw):
    with pytest.raises(ParseError) as err:
        parse_verdict(stage, raw)
    assert err.value.raw == raw


def test_expected_count_enforced():
    raw = '{"judgments": [{"index": 1, "label": 1}, {"index": 3, "label": 0}]}'
    with pytest.raises(ParseError):
        parse_verdict(Stage.RELEVANCY_JUDGE, raw, expected_count=2)
    ok = '{"judgments": [{"index": 2, "label": 0}, {"index": 1, "label": 1}]}'
    assert [x.index for x in parse_verdict(Stage.RELEVANCY_JUDGE, ok, expected_count=2).payload] == [1, 2]


def test_skips_invalid_objects_before_valid_one():
    raw = 'Example: {"foo": 1}. Answer: {"statements": ["a.", "b."]}'
    assert parse_verdict(Stage.STATEMENT_SPLIT, raw).payload == ["a.", "b."]


def test_few_shot_round_trip(templates):
    for stage in Stage:
        for _, expected in templates[stage].few_shot_examples:
            first = parse_verdict(stage, format_output(stage, expected)).payload
            again = parse_verdict(stage, format_output(stage, first)).payload
            assert first == again


labels = st.lists(st.integers(0, 1), min_size=1, max_size=12)


@given(labels)
def test_relevancy_round_trip_property(values):
    payload = [StatementLabel(i, v, f"r{i}") for i, v in enumerate(values, 1)]
    assert parse_verdict(Stage.RELEVANCY_JUDGE, format_output(Stage.RELEVANCY_JUDGE, payload)).payload == payload


@given(st.lists(st.sampled_from(ADHERENCE_CLASSES), min_size=1, max_size=12))
def test_adherence_round_trip_property(classes):
    payload = [StatementLabel(i, c, "why") for i, c in enumerate(classes, 1)]
    assert parse_verdict(Stage.ADHERENCE_JUDGE, format_output(Stage.ADHERENCE_JUDGE, payload)).payload == payload


@given(st.text(min_size=0, max_size=80))
def test_context_edit_round_trip_property(text):
    assert parse_verdict(Stage.CONTEXT_EDIT, format_output(Stage.CONTEXT_EDIT, text)).payload == text


# --- re-ask policy -------------------------------------------------------


def _gw(responses):
    it = iter(responses)
    gw = Gateway()
    gw.register_mock("e", MockBackend([(lambda m: True, lambda m: next(it))]))
    return gw, ModelProfile("e", "evaluator", "mock:e")


def test_reask_then_success(templates):
    gw, prof = _gw(["garbage", "still garbage", '{"knowledge_intensive": false}'])
    v, exchanges = ask(gw, prof, templates[Stage.REQUIREMENT_CHECK], {"query": "hi"})
    assert v.payload is False and v.parse_attempts == 3
    assert len(exchanges) == 3
    assert exchanges[1].request[-1] == ("user", REASK_REMINDER)
    assert exchanges[1].request[-2] == ("assistant", "garbage")


def test_malformed_thrice_is_stage_error(templates):
    gw, prof = _gw(["bad"] * 3)
    with pytest.raises(StageError) as err:
        ask(gw, prof, templates[Stage.REQUIREMENT_CHECK], {"query": "hi"})
    assert err.value.stage == "requirement_check"
    assert gw.call_count(prof) == 3

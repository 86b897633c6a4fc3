"""Few-shot prompt templates per stage and lenient-extract / strict-validate parsing.

Templates live one YAML file per stage (``<stage>.yaml``) with keys:

``system``        instructions, including the required output format
``instance``      the per-call text with ``{name}`` placeholders
``few_shot``      list of ``{input: {...}, output: <payload>}`` pairs
``output_schema`` schema tag (defaults to the stage name)

Every stage except ``answer_generation`` answers with a JSON object; the
parser pulls the first schema-valid object out of whatever prose surrounds it.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import yaml

from .errors import ConfigurationError, ParseError, RenderError, StageError
from .gateway import ChatExchange, Gateway, Message, ModelProfile

TEMPLATE_DIR = Path(__file__).parent / "templates"
MAX_REASKS = 2
REASK_REMINDER = "Respond only in the required format."


class Stage(str, Enum):
    REQUIREMENT_CHECK = "requirement_check"
    CONTEXT_EDIT = "context_edit"
    STATEMENT_SPLIT = "statement_split"
    RELEVANCY_JUDGE = "relevancy_judge"
    ADHERENCE_JUDGE = "adherence_judge"
    ADHERENCE_EDIT = "adherence_edit"
    ANSWER_GENERATION = "answer_generation"
    ANSWER_GRADING = "answer_grading"


REQUIRED_PLACEHOLDERS: dict[Stage, frozenset[str]] = {
    Stage.REQUIREMENT_CHECK: frozenset({"query"}),
    Stage.CONTEXT_EDIT: frozenset({"query", "context"}),
    Stage.STATEMENT_SPLIT: frozenset({"response"}),
    Stage.RELEVANCY_JUDGE: frozenset({"query", "statements"}),
    Stage.ADHERENCE_JUDGE: frozenset({"context", "statements"}),
    Stage.ADHERENCE_EDIT: frozenset({"context", "statements"}),
    Stage.ANSWER_GENERATION: frozenset({"query", "context_section"}),
    Stage.ANSWER_GRADING: frozenset({"query", "gold", "response"}),
}

ADHERENCE_CLASSES = ("directly_derivable", "logically_inferable", "not_grounded")
_CLASS_ALIASES = {
    "class_1": "directly_derivable",
    "class1": "directly_derivable",
    "1": "directly_derivable",
    "class_2": "logically_inferable",
    "class2": "logically_inferable",
    "2": "logically_inferable",
    "class_3": "not_grounded",
    "class3": "not_grounded",
    "3": "not_grounded",
}


def _labels_schema(label_schema: dict, extra: dict | None = None) -> dict:
    item = {
        "type": "object",
        "required": ["index", "label"],
        "properties": {
            "index": {"type": "integer", "minimum": 1},
            "rationale": {"type": "string"},
            "label": label_schema,
            **(extra or {}),
        },
    }
    return {
        "type": "object",
        "required": ["judgments"],
        "properties": {"judgments": {"type": "array", "items": item}},
    }


SCHEMAS: dict[Stage, dict] = {
    Stage.REQUIREMENT_CHECK: {
        "type": "object",
        "required": ["knowledge_intensive"],
        "properties": {"rationale": {"type": "string"}, "knowledge_intensive": {"type": "boolean"}},
    },
    Stage.CONTEXT_EDIT: {
        "type": "object",
        "required": ["edited_context"],
        "properties": {"rationale": {"type": "string"}, "edited_context": {"type": "string"}},
    },
    Stage.STATEMENT_SPLIT: {
        "type": "object",
        "required": ["statements"],
        "properties": {"statements": {"type": "array", "items": {"type": "string", "minLength": 1}}},
    },
    Stage.RELEVANCY_JUDGE: _labels_schema({"enum": [0, 1]}),
    Stage.ADHERENCE_JUDGE: _labels_schema({"type": "string"}),
    Stage.ADHERENCE_EDIT: _labels_schema({"enum": ["rewrite", "remove"]}, {"rewritten_text": {"type": ["string", "null"]}}),
    Stage.ANSWER_GRADING: {
        "type": "object",
        "required": ["correct"],
        "properties": {"rationale": {"type": "string"}, "correct": {"enum": [0, 1]}},
    },
}


@dataclass(frozen=True)
class StatementLabel:
    """One per-statement judgment.  ``label`` is 0/1 for relevancy, a class
    name for adherence and ``rewrite``/``remove`` for adherence edits."""

    index: int
    label: Any
    rationale: str = ""
    rewritten_text: str | None = None


@dataclass(frozen=True)
class ParsedVerdict:
    stage: Stage
    payload: Any
    raw_text: str
    parse_attempts: int = 1
    rationale: str = ""

    def to_dict(self) -> dict:
        payload = self.payload
        if isinstance(payload, list) and payload and isinstance(payload[0], StatementLabel):
            payload = [_label_dict(x) for x in payload]
        return {
            "stage": self.stage.value,
            "payload": payload,
            "rationale": self.rationale,
            "raw_text": self.raw_text,
            "parse_attempts": self.parse_attempts,
        }


def _label_dict(x: StatementLabel) -> dict:
    d = {"index": x.index, "rationale": x.rationale, "label": x.label}
    if x.rewritten_text is not None:
        d["rewritten_text"] = x.rewritten_text
    return d


# --- templates -----------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER.findall(text))


def substitute(text: str, bindings: dict[str, Any]) -> str:
    """Single-pass ``{name}`` substitution; bound values are never re-scanned."""

    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in bindings:
            raise RenderError(name)
        return str(bindings[name])

    return _PLACEHOLDER.sub(repl, text)


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    template_text: str
    system_text: str = ""
    few_shot_examples: tuple[tuple[dict, Any], ...] = ()
    output_schema: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))
        if not self.output_schema:
            object.__setattr__(self, "output_schema", self.stage.value)
        missing = REQUIRED_PLACEHOLDERS[self.stage] - placeholders(self.template_text)
        if missing:
            raise ConfigurationError(f"{self.stage.value} template lacks placeholder(s) {sorted(missing)}")
        for inputs, expected in self.few_shot_examples:
            try:
                parse_verdict(self.stage, format_output(self.stage, expected))
            except ParseError as exc:
                raise ConfigurationError(f"{self.stage.value} few-shot output fails its schema: {exc}") from exc

    @classmethod
    def from_yaml(cls, text: str, stage: str | None = None) -> "PromptTemplate":
        data = yaml.safe_load(text)
        shots = tuple((ex["input"], ex["output"]) for ex in data.get("few_shot") or ())
        return cls(
            stage=Stage(data.get("stage", stage)),
            template_text=data["instance"],
            system_text=data.get("system", ""),
            few_shot_examples=shots,
            output_schema=data.get("output_schema", ""),
        )


def render(template: PromptTemplate, bindings: dict[str, Any]) -> list[Message]:
    """Message list: system text, few-shot user/assistant turns, then the live instance."""
    messages: list[Message] = []
    if template.system_text:
        messages.append(("system", template.system_text.strip()))
    for inputs, expected in template.few_shot_examples:
        messages.append(("user", substitute(template.template_text, inputs).strip()))
        messages.append(("assistant", format_output(template.stage, expected)))
    messages.append(("user", substitute(template.template_text, bindings).strip()))
    return messages


class TemplateSet:
    """All stage templates loaded from one directory, plus a content hash."""

    def __init__(self, templates: dict[Stage, PromptTemplate], digest: str) -> None:
        self.templates = templates
        self.hash = digest

    def __getitem__(self, stage: Stage | str) -> PromptTemplate:
        return self.templates[Stage(stage)]

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        directory = Path(directory) if directory else TEMPLATE_DIR
        h = hashlib.sha256()
        templates: dict[Stage, PromptTemplate] = {}
        for stage in Stage:
            path = directory / f"{stage.value}.yaml"
            if not path.exists():
                raise ConfigurationError(f"missing template file {path}")
            raw = path.read_bytes()
            h.update(path.name.encode() + b"\0" + raw + b"\0")
            templates[stage] = PromptTemplate.from_yaml(raw.decode("utf-8"), stage.value)
        return cls(templates, h.hexdigest())

    @classmethod
    def default(cls) -> "TemplateSet":
        """The packaged templates, loaded once per process."""
        return _default_templates()


@functools.lru_cache(maxsize=1)
def _default_templates() -> TemplateSet:
    return TemplateSet.load(TEMPLATE_DIR)


# --- output formatting and parsing ---------------------------------------


def format_output(stage: Stage | str, payload: Any, rationale: str = "") -> str:
    """Serialize a payload the way a compliant model would answer."""
    stage = Stage(stage)
    if stage is Stage.ANSWER_GENERATION:
        return str(payload)
    if stage is Stage.REQUIREMENT_CHECK:
        obj: dict = {"rationale": rationale, "knowledge_intensive": bool(payload)}
    elif stage is Stage.CONTEXT_EDIT:
        obj = {"rationale": rationale, "edited_context": payload}
    elif stage is Stage.STATEMENT_SPLIT:
        obj = {"statements": list(payload)}
    elif stage is Stage.ANSWER_GRADING:
        obj = {"rationale": rationale, "correct": int(bool(payload))}
    else:
        obj = {"judgments": [_label_dict(_coerce_label(x)) for x in payload]}
    return json.dumps(obj, ensure_ascii=False, indent=1)


def _coerce_label(x: Any) -> StatementLabel:
    if isinstance(x, StatementLabel):
        return x
    return StatementLabel(int(x["index"]), x["label"], x.get("rationale", ""), x.get("rewritten_text"))


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def _json_candidates(raw: str):
    for m in _FENCE.finditer(raw):
        yield m.group(1)
    decoder = json.JSONDecoder()
    for i, ch in enumerate(raw):
        if ch == "{":
            try:
                obj, _ = decoder.raw_decode(raw, i)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                yield obj


# checked once here; jsonschema.validate() would re-check the schema per call
_VALIDATORS = {}
for _stage, _schema in SCHEMAS.items():
    _cls = jsonschema.validators.validator_for(_schema)
    _cls.check_schema(_schema)
    _VALIDATORS[_stage] = _cls(_schema)


def _extract(stage: Stage, raw: str) -> dict:
    validator = _VALIDATORS[stage]
    last_error = "no JSON object found"
    for cand in _json_candidates(raw):
        if isinstance(cand, str):
            try:
                cand = json.loads(cand)
            except json.JSONDecodeError:
                continue
            if not isinstance(cand, dict):
                continue
        error = jsonschema.exceptions.best_match(validator.iter_errors(cand))
        if error is not None:
            last_error = f"schema violation: {error.message}"
            continue
        return cand
    raise ParseError(stage.value, last_error, raw)


_YES = {"yes", "true", "y", "1"}
_NO = {"no", "false", "n", "0"}


def normalize_class(label: str) -> str | None:
    key = label.strip().lower().replace(" ", "_").replace("-", "_")
    if key in ADHERENCE_CLASSES:
        return key
    return _CLASS_ALIASES.get(key)


def parse_verdict(stage: Stage | str, raw: str, expected_count: int | None = None, attempts: int = 1) -> ParsedVerdict:
    """Parse one model answer for ``stage``.

    ``expected_count`` makes per-statement stages require judgments for
    exactly the indices ``1..expected_count``.
    """
    stage = Stage(stage)
    if not raw or not raw.strip():
        raise ParseError(stage.value, "empty output", raw)

    if stage is Stage.ANSWER_GENERATION:
        return ParsedVerdict(stage, raw.strip(), raw, attempts)

    if stage is Stage.REQUIREMENT_CHECK:
        word = re.match(r"\W*(\w+)", raw.strip())
        first = word.group(1).lower() if word else ""
        if "{" not in raw and (first in _YES or first in _NO):
            return ParsedVerdict(stage, first in _YES, raw, attempts)
        obj = _extract(stage, raw)
        return ParsedVerdict(stage, obj["knowledge_intensive"], raw, attempts, obj.get("rationale", ""))

    obj = _extract(stage, raw)
    if stage is Stage.CONTEXT_EDIT:
        return ParsedVerdict(stage, obj["edited_context"], raw, attempts, obj.get("rationale", ""))
    if stage is Stage.STATEMENT_SPLIT:
        return ParsedVerdict(stage, [s.strip() for s in obj["statements"]], raw, attempts)
    if stage is Stage.ANSWER_GRADING:
        return ParsedVerdict(stage, bool(obj["correct"]), raw, attempts, obj.get("rationale", ""))

    labels = []
    for j in obj["judgments"]:
        label = j["label"]
        if stage is Stage.ADHERENCE_JUDGE:
            label = normalize_class(label)
            if label is None:
                raise ParseError(stage.value, f"adherence label {j['label']!r} is not one of {ADHERENCE_CLASSES}", raw)
        if isinstance(label, bool):
            label = int(label)
        labels.append(StatementLabel(j["index"], label, j.get("rationale", ""), j.get("rewritten_text")))
    labels.sort(key=lambda x: x.index)
    if expected_count is not None:
        got = [x.index for x in labels]
        if got != list(range(1, expected_count + 1)):
            raise ParseError(stage.value, f"expected judgments for statements 1..{expected_count}, got {got}", raw)
    return ParsedVerdict(stage, labels, raw, attempts)


def ask(
    gateway: Gateway,
    profile: ModelProfile,
    template: PromptTemplate,
    bindings: dict[str, Any],
    expected_count: int | None = None,
    max_reasks: int = MAX_REASKS,
) -> tuple[ParsedVerdict, list[ChatExchange]]:
    """Render, call and parse, re-asking with a format reminder on parse failure."""
    messages = render(template, bindings)
    exchanges: list[ChatExchange] = []
    for attempt in range(1, max_reasks + 2):
        exchange = gateway.complete(profile, messages)
        exchanges.append(exchange)
        try:
            return parse_verdict(template.stage, exchange.response_text, expected_count, attempt), exchanges
        except ParseError as exc:
            error = exc
            messages = list(messages) + [("assistant", exchange.response_text), ("user", REASK_REMINDER)]
    err = StageError(template.stage.value, f"unparseable after {max_reasks + 1} attempt(s): {error}")
    err.exchanges = exchanges
    raise err


def number_statements(statements: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {s}" for i, s in enumerate(statements, 1))

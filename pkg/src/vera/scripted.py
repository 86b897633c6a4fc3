"""Deterministic rule-based stand-ins for the generator and evaluator models.

``ScriptedWorld`` installs two :class:`MockBackend` instances into a gateway.
They read the live instance (last user message) as laid out by the default
templates and answer every stage with simple lexical rules:

* requirement check -- knowledge-intensive unless listed in ``chit_chat``
* context edit      -- keep sentences sharing a content word with the query
* split             -- one statement per sentence
* relevancy         -- relevant iff the statement shares a content word with the query
* adherence         -- substring of context: derivable; all content words in
                       context: inferable; otherwise not grounded
* adherence edit    -- rewrite to the context sentence with the largest word
                       overlap (at least half), else remove
* grading           -- correct iff a normalized gold answer occurs in the response

Per-question overrides (``answers``, ``context_edits``) script exact transcripts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .gateway import Gateway, Message, MockBackend, ModelProfile
from .metrics import normalize_answer

STOPWORDS = frozenset(
    "a an the and or but of to in on at by for with from as is are was were be been being it its this that "
    "these those what which who whom whose when where why how did does do has have had not no yes than then "
    "there their they them he she his her you your we our i me my about into over under after before".split()
)
_SENTENCE = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[A-Za-z0-9]+")


def content_words(text: str) -> set[str]:
    return {w.lower() for w in _WORD.findall(text) if w.lower() not in STOPWORDS and len(w) > 2}


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text.strip()) if s.strip()]


def _section(text: str, label: str, stop_labels: tuple[str, ...] = ()) -> str | None:
    m = re.search(rf"(?m)^{re.escape(label)}:[ \t]*\n?", text)
    if not m:
        return None
    rest = text[m.end():]
    end = len(rest)
    for stop in stop_labels:
        s = re.search(rf"(?m)^{re.escape(stop)}:", rest)
        if s:
            end = min(end, s.start())
    return rest[:end].strip()


def _numbered(block: str) -> list[str]:
    return [m.group(2).strip() for m in re.finditer(r"(?m)^\[(\d+)\] (.*)$", block)]


@dataclass
class ScriptedWorld:
    answers: dict[str, str] = field(default_factory=dict)
    context_edits: dict[str, str] = field(default_factory=dict)
    chit_chat: set[str] = field(default_factory=set)
    malformed_stages: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.generator_backend = MockBackend([(lambda m: True, self._generate)])
        self.evaluator_backend = MockBackend(
            [
                (lambda m: "malformed" in self.malformed_stages, lambda m: "I am not sure how to format this."),
                (lambda m: "Statements judged not grounded:" in m[-1][1], self._adherence_edit),
                (lambda m: "Gold answers:" in m[-1][1], self._grade),
                (lambda m: "Statements:" in m[-1][1] and "Query:" in m[-1][1], self._relevancy),
                (lambda m: "Statements:" in m[-1][1], self._adherence),
                (lambda m: "Response:" in m[-1][1], self._split),
                (lambda m: "Context:" in m[-1][1] and "Query:" in m[-1][1], self._context_edit),
                (lambda m: m[-1][1].startswith("Query:"), self._requirement),
            ]
        )

    def install(self, gateway: Gateway, generator: str = "scripted-generator", evaluator: str = "scripted-evaluator"):
        gateway.register_mock("generator", self.generator_backend)
        gateway.register_mock("evaluator", self.evaluator_backend)
        return (
            ModelProfile(generator, "generator", "mock:generator"),
            ModelProfile(evaluator, "evaluator", "mock:evaluator"),
        )

    # generator

    def _generate(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        question = _section(text, "Question") or ""
        if question in self.answers:
            return self.answers[question]
        context = _section(text, "Context", ("Question",))
        if not context:
            return f"I do not know the answer to: {question}"
        return " ".join(sentences(context)[:2])

    # evaluator stages

    def _requirement(self, msgs: tuple[Message, ...]) -> str:
        query = _section(msgs[-1][1], "Query") or ""
        ki = query not in self.chit_chat
        return json.dumps({"rationale": "scripted", "knowledge_intensive": ki})

    def _context_edit(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        query = _section(text, "Query", ("Context",)) or ""
        context = _section(text, "Context") or ""
        if query in self.context_edits:
            edited = self.context_edits[query]
        else:
            q = content_words(query)
            edited = " ".join(s for s in sentences(context) if content_words(s) & q)
        return "Here is the edit.\n" + json.dumps({"rationale": "scripted", "edited_context": edited})

    def _split(self, msgs: tuple[Message, ...]) -> str:
        response = _section(msgs[-1][1], "Response") or ""
        return json.dumps({"statements": sentences(response)})

    def _relevancy(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        q = content_words(_section(text, "Query", ("Statements",)) or "")
        stmts = _numbered(_section(text, "Statements") or "")
        out = [{"index": i, "rationale": "scripted", "label": int(bool(content_words(s) & q))} for i, s in enumerate(stmts, 1)]
        return json.dumps({"judgments": out})

    @staticmethod
    def classify(statement: str, context: str) -> str:
        if statement.strip().lower() in context.lower():
            return "directly_derivable"
        words = content_words(statement)
        if words and words <= content_words(context):
            return "logically_inferable"
        return "not_grounded"

    def _adherence(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        context = _section(text, "Context", ("Statements",)) or ""
        stmts = _numbered(_section(text, "Statements") or "")
        out = [{"index": i, "rationale": "scripted", "label": self.classify(s, context)} for i, s in enumerate(stmts, 1)]
        return json.dumps({"judgments": out})

    def _adherence_edit(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        context = _section(text, "Context", ("Statements judged not grounded",)) or ""
        stmts = _numbered(_section(text, "Statements judged not grounded") or "")
        out = []
        for i, s in enumerate(stmts, 1):
            words = content_words(s)
            best, best_overlap = None, 0.0
            for cs in sentences(context):
                overlap = len(words & content_words(cs)) / max(len(words), 1)
                if overlap > best_overlap:
                    best, best_overlap = cs, overlap
            if best is not None and best_overlap >= 0.5 and best.strip() != s.strip():
                out.append({"index": i, "rationale": "scripted", "label": "rewrite", "rewritten_text": best})
            else:
                out.append({"index": i, "rationale": "scripted", "label": "remove"})
        return json.dumps({"judgments": out})

    def _grade(self, msgs: tuple[Message, ...]) -> str:
        text = msgs[-1][1]
        gold = _section(text, "Gold answers", ("Response",)) or ""
        response = normalize_answer(_section(text, "Response") or "")
        correct = any(normalize_answer(g) and normalize_answer(g) in response for g in gold.split(";"))
        return json.dumps({"rationale": "scripted", "correct": int(correct)})

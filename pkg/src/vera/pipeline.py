"""The four validation/enhancement stages and their composition.

with_vera:   requirement check -> retrieve -> context edit -> generate
             -> split -> relevancy edit -> adherence edit
without_vera: retrieve -> generate, optionally audited (same judges, no edits)
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

from .errors import ContractViolationError, EmptyCorpusError, StageError, VeraError
from .gateway import ChatExchange, Gateway, ModelProfile
from .metrics import CANNOT_ANSWER, MetricSet
from .prompts import (
    ADHERENCE_CLASSES,
    ParsedVerdict,
    Stage,
    StatementLabel,
    TemplateSet,
    ask,
    number_statements,
)
from .retriever import DEFAULT_TOKENIZER, DEFAULT_TOP_K, ContextBundle, Tokenizer, VectorIndex

logger = logging.getLogger(__name__)

Mode = Literal["with_vera", "without_vera"]
AdherenceClass = Literal["directly_derivable", "logically_inferable", "not_grounded"]

GROUNDED_CLASSES = frozenset({"directly_derivable", "logically_inferable"})


# --- data ----------------------------------------------------------------


@dataclass(frozen=True)
class QueryCase:
    query_id: str
    question: str
    gold_answers: tuple[str, ...] | None = None
    unanswerable_flag: bool | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError(f"query {self.query_id!r}: empty question")


@dataclass
class AtomicStatement:
    index: int
    text: str
    relevance: int | None = None
    adherence_class: AdherenceClass | None = None
    g_score: int | None = None
    edit_action: Literal["keep", "remove", "rewrite"] | None = None
    rewritten_text: str | None = None
    relevance_rationale: str = ""
    adherence_rationale: str = ""

    @property
    def rationale(self) -> str:
        return " | ".join(r for r in (self.relevance_rationale, self.adherence_rationale) if r)

    @property
    def surviving_text(self) -> str | None:
        if self.edit_action == "remove":
            return None
        if self.edit_action == "rewrite":
            return self.rewritten_text
        return self.text

    def check(self) -> None:
        if self.adherence_class is not None and self.g_score != int(self.adherence_class in GROUNDED_CLASSES):
            raise ContractViolationError("adherence_judge", f"statement {self.index}: g_score inconsistent with class")
        if self.edit_action == "rewrite" and (not self.rewritten_text or self.rewritten_text.strip() == self.text.strip()):
            raise ContractViolationError("adherence_edit", f"statement {self.index}: rewrite needs new, non-empty text")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "relevance": self.relevance,
            "adherence_class": self.adherence_class,
            "g_score": self.g_score,
            "edit_action": self.edit_action,
            "rewritten_text": self.rewritten_text,
            "relevance_rationale": self.relevance_rationale,
            "adherence_rationale": self.adherence_rationale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AtomicStatement":
        return cls(**d)


@dataclass
class StageTrace:
    stage: str
    exchanges: list[ChatExchange] = field(default_factory=list)
    verdict: ParsedVerdict | None = None
    scores: dict[str, float] = field(default_factory=dict)
    applied: bool = True

    @property
    def elapsed(self) -> float:
        # model time only, so replayed runs serialize identically
        return sum(e.latency for e in self.exchanges)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "applied": self.applied,
            "scores": self.scores,
            "elapsed": self.elapsed,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "exchanges": [e.to_dict() for e in self.exchanges],
        }


@dataclass
class PipelineResult:
    query_id: str
    mode: Mode
    retrieval_used: bool
    context: ContextBundle | None
    raw_response: str
    relevancy_edited_response: str
    final_response: str
    halted: bool = False
    halt_reason: str | None = None
    error_stage: str | None = None
    statements: list[AtomicStatement] = field(default_factory=list)
    traces: list[StageTrace] = field(default_factory=list)
    metrics: MetricSet = field(default_factory=MetricSet)

    @property
    def failed(self) -> bool:
        return self.error_stage is not None

    def generator_calls(self) -> int:
        return sum(len(t.exchanges) for t in self.traces if t.stage == Stage.ANSWER_GENERATION.value)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "mode": self.mode,
            "retrieval_used": self.retrieval_used,
            "halted": self.halted,
            "halt_reason": self.halt_reason,
            "error_stage": self.error_stage,
            "context": self.context.to_dict() if self.context else None,
            "raw_response": self.raw_response,
            "relevancy_edited_response": self.relevancy_edited_response,
            "final_response": self.final_response,
            "statements": [s.to_dict() for s in self.statements],
            "metrics": self.metrics.to_dict(),
            "traces": [t.to_dict() for t in self.traces],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineResult":
        """Rebuild the scored parts of a result.  Traces are not rehydrated."""
        return cls(
            query_id=d["query_id"],
            mode=d["mode"],
            retrieval_used=d["retrieval_used"],
            context=ContextBundle.from_dict(d["context"]) if d.get("context") else None,
            raw_response=d["raw_response"],
            relevancy_edited_response=d["relevancy_edited_response"],
            final_response=d["final_response"],
            halted=d["halted"],
            halt_reason=d.get("halt_reason"),
            error_stage=d.get("error_stage"),
            statements=[AtomicStatement.from_dict(s) for s in d.get("statements", [])],
            metrics=MetricSet.from_dict(d["metrics"]),
        )


# --- scoring -------------------------------------------------------------


def retrieval_relevance(edited_token_count: int, original_token_count: int) -> float:
    """|C'| / |C| in tokens."""
    if original_token_count <= 0:
        raise ValueError("original context must contain at least one token")
    return edited_token_count / original_token_count


def mean_binary(scores: Sequence[int]) -> float:
    if not scores:
        raise ValueError("no statements to score")
    return sum(scores) / len(scores)


def response_relevance(relevance: Sequence[int]) -> float:
    return mean_binary(relevance)


def adherence_score(adherence_class: str) -> int:
    if adherence_class not in ADHERENCE_CLASSES:
        raise ValueError(f"unknown adherence class {adherence_class!r}")
    return int(adherence_class in GROUNDED_CLASSES)


def response_adherence(classes: Sequence[str]) -> float:
    return mean_binary([adherence_score(c) for c in classes])


def join_statements(texts: Sequence[str]) -> str:
    return " ".join(t.strip() for t in texts if t and t.strip())


# --- pipeline ------------------------------------------------------------


class Vera:
    """Evaluator-cum-enhancer wrapped around a retriever and a generator.

    Every public stage method accepts an optional ``traces`` list and appends
    one :class:`StageTrace` per model prompt it issues.
    """

    def __init__(
        self,
        gateway: Gateway,
        generator: ModelProfile,
        evaluator: ModelProfile,
        templates: TemplateSet | None = None,
        index: VectorIndex | None = None,
        top_k: int = DEFAULT_TOP_K,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        audit: bool = True,
    ) -> None:
        self.gateway = gateway
        self.generator = generator
        self.evaluator = evaluator
        self.templates = templates or TemplateSet.default()
        self.index = index
        self.top_k = top_k
        self.tokenizer = tokenizer
        self.audit = audit

    def _ask(self, stage: Stage, profile: ModelProfile, bindings: dict, traces: list | None, expected_count: int | None = None):
        try:
            verdict, exchanges = ask(self.gateway, profile, self.templates[stage], bindings, expected_count)
        except StageError as exc:
            if traces is not None:
                traces.append(StageTrace(stage.value, getattr(exc, "exchanges", [])))
            raise
        trace = StageTrace(stage.value, exchanges, verdict)
        if traces is not None:
            traces.append(trace)
        return verdict, trace

    # stage 1

    def needs_retrieval(self, query: QueryCase, traces: list | None = None) -> bool:
        verdict, _ = self._ask(Stage.REQUIREMENT_CHECK, self.evaluator, {"query": query.question}, traces)
        return bool(verdict.payload)

    def retrieve(self, query: QueryCase) -> ContextBundle:
        if self.index is None or len(self.index) == 0:
            raise EmptyCorpusError("retrieval required but no (non-empty) index is configured")
        return self.index.retrieve(query.question, self.top_k, query.query_id)

    # stage 2

    def evaluate_and_edit_context(self, query: QueryCase, context: ContextBundle, traces: list | None = None) -> ContextBundle:
        """Return a copy of ``context`` carrying the edited text and its token count."""
        if not context.chunks or context.original_token_count <= 0:
            raise ValueError("context must hold at least one non-empty chunk")
        verdict, trace = self._ask(
            Stage.CONTEXT_EDIT, self.evaluator, {"query": query.question, "context": context.original_text}, traces
        )
        edited = verdict.payload.strip()
        n = len(self.tokenizer.tokenize(edited))
        if n > context.original_token_count:
            raise ContractViolationError(
                Stage.CONTEXT_EDIT.value,
                f"edited context has {n} tokens, more than the original {context.original_token_count}",
            )
        trace.scores["R_retrieval"] = retrieval_relevance(n, context.original_token_count)
        out = copy.copy(context)
        out.edited_text = edited
        out.edited_token_count = n
        return out

    # generation

    def generate_response(self, query: QueryCase, context: ContextBundle | None, traces: list | None = None) -> str:
        if context is None:
            section = ""
        else:
            text = context.edited_text if context.edited_text is not None else context.original_text
            section = f"Context:\n{text}\n\n"
        verdict, _ = self._ask(Stage.ANSWER_GENERATION, self.generator, {"query": query.question, "context_section": section}, traces)
        return verdict.payload

    # stage 3

    def split_atomic_statements(self, response: str, traces: list | None = None) -> list[AtomicStatement]:
        if not response.strip():
            raise ValueError("cannot split an empty response")
        verdict, _ = self._ask(Stage.STATEMENT_SPLIT, self.evaluator, {"response": response}, traces)
        texts = [t for t in verdict.payload if t.strip()]
        if not texts:
            raise StageError(Stage.STATEMENT_SPLIT.value, "judge returned no statements for a non-empty response")
        return [AtomicStatement(i, t) for i, t in enumerate(texts)]

    def judge_relevancy(self, statements: list[AtomicStatement], query: QueryCase, traces: list | None = None) -> float:
        """Label every statement with r(s_i) and return R_response (no edit)."""
        verdict, trace = self._ask(
            Stage.RELEVANCY_JUDGE,
            self.evaluator,
            {"query": query.question, "statements": number_statements([s.text for s in statements])},
            traces,
            expected_count=len(statements),
        )
        labels: list[StatementLabel] = verdict.payload
        for s, lab in zip(statements, labels):
            s.relevance = int(lab.label)
            s.relevance_rationale = lab.rationale
        score = response_relevance([s.relevance for s in statements])
        trace.scores["R_response"] = score
        return score

    def evaluate_and_edit_relevancy(
        self, statements: list[AtomicStatement], query: QueryCase, traces: list | None = None
    ) -> tuple[str, float]:
        score = self.judge_relevancy(statements, query, traces)
        edited = join_statements([s.text for s in statements if s.relevance == 1])
        return edited, score

    # stage 4

    def judge_adherence(self, statements: list[AtomicStatement], context_text: str, traces: list | None = None) -> float:
        """Classify every statement into the three adherence classes and return A_response (no edit)."""
        verdict, trace = self._ask(
            Stage.ADHERENCE_JUDGE,
            self.evaluator,
            {"context": context_text, "statements": number_statements([s.text for s in statements])},
            traces,
            expected_count=len(statements),
        )
        for s, lab in zip(statements, verdict.payload):
            s.adherence_class = lab.label
            s.g_score = adherence_score(lab.label)
            s.adherence_rationale = lab.rationale
        score = mean_binary([s.g_score for s in statements])
        trace.scores["A_response"] = score
        return score

    def evaluate_and_edit_adherence(
        self, statements: list[AtomicStatement], context: ContextBundle, traces: list | None = None
    ) -> tuple[str, float]:
        if not statements:
            raise ValueError("no statements entered the adherence stage")
        context_text = context.edited_text if context.edited_text is not None else context.original_text
        score = self.judge_adherence(statements, context_text, traces)

        ungrounded = [s for s in statements if s.g_score == 0]
        for s in statements:
            s.edit_action = "keep" if s.g_score == 1 else None
        if ungrounded:
            verdict, _ = self._ask(
                Stage.ADHERENCE_EDIT,
                self.evaluator,
                {"context": context_text, "statements": number_statements([s.text for s in ungrounded])},
                traces,
                expected_count=len(ungrounded),
            )
            for s, lab in zip(ungrounded, verdict.payload):
                if lab.label == "rewrite":
                    s.edit_action = "rewrite"
                    s.rewritten_text = (lab.rewritten_text or "").strip()
                else:
                    s.edit_action = "remove"
                s.check()
        final = join_statements([s.surviving_text for s in statements if s.surviving_text])
        return final, score

    # composition

    def run_pipeline(self, query: QueryCase, mode: Mode = "with_vera", context: ContextBundle | None = None) -> PipelineResult:
        """Answer one query.

        ``context`` supplies an inline passage (datasets that ship their own
        context); it replaces retrieval and, in with_vera mode, the
        requirement check.
        """
        if mode not in ("with_vera", "without_vera"):
            raise ValueError(f"unknown mode {mode!r}")
        result = PipelineResult(query.query_id, mode, False, None, "", "", "")
        stage = Stage.REQUIREMENT_CHECK.value
        try:
            if mode == "with_vera":
                self._run_with_vera(query, context, result)
            else:
                self._run_without_vera(query, context, result)
        except VeraError as exc:
            stage = getattr(exc, "stage", None) or (result.traces[-1].stage if result.traces else stage)
            logger.warning("%s [%s] failed at %s: %s", query.query_id, mode, stage, exc)
            result.halted = True
            result.error_stage = stage
            result.halt_reason = f"stage error in {stage}: {exc}"
        return result

    def _run_with_vera(self, query: QueryCase, context: ContextBundle | None, result: PipelineResult) -> None:
        traces = result.traces
        metrics = result.metrics
        if context is None and self.needs_retrieval(query, traces):
            context = self.retrieve(query)
        if context is not None:
            result.retrieval_used = True
            context = self.evaluate_and_edit_context(query, context, traces)
            result.context = context
            metrics.context_relevance = retrieval_relevance(context.edited_token_count, context.original_token_count)
            if context.edited_token_count == 0:
                result.halted = True
                result.halt_reason = CANNOT_ANSWER
                result.final_response = CANNOT_ANSWER
                return

        raw = self.generate_response(query, context, traces)
        result.raw_response = raw
        statements = self.split_atomic_statements(raw, traces)
        result.statements = statements
        metrics.statement_count = len(statements)
        edited, r_score = self.evaluate_and_edit_relevancy(statements, query, traces)
        metrics.response_relevance = r_score
        result.relevancy_edited_response = edited

        kept = [s for s in statements if s.relevance == 1]
        if not kept:
            result.final_response = CANNOT_ANSWER
            return
        if context is None:
            result.final_response = edited
            return
        final, a_score = self.evaluate_and_edit_adherence(kept, context, traces)
        metrics.response_adherence = a_score
        result.final_response = final or CANNOT_ANSWER

    def _run_without_vera(self, query: QueryCase, context: ContextBundle | None, result: PipelineResult) -> None:
        traces = result.traces
        metrics = result.metrics
        if context is None:
            context = self.retrieve(query)
        result.retrieval_used = True
        result.context = context
        raw = self.generate_response(query, context, traces)
        result.raw_response = raw
        result.relevancy_edited_response = raw
        result.final_response = raw
        if not self.audit:
            return

        audit_traces: list[StageTrace] = []
        try:
            audited = self.evaluate_and_edit_context(query, context, audit_traces)
            metrics.context_relevance = retrieval_relevance(audited.edited_token_count, audited.original_token_count)
            statements = self.split_atomic_statements(raw, audit_traces)
            result.statements = statements
            metrics.statement_count = len(statements)
            metrics.response_relevance = self.judge_relevancy(statements, query, audit_traces)
            metrics.response_adherence = self.judge_adherence(statements, context.original_text, audit_traces)
        finally:
            for t in audit_traces:
                t.applied = False
            traces.extend(audit_traces)


def rejudge(vera: Vera, result: PipelineResult, query: QueryCase) -> tuple[float, float | None]:
    """Re-run relevancy and adherence judging on ``result.final_response``.

    Returns (R_response, A_response); A_response is None when the result has
    no context to judge against.
    """
    statements = vera.split_atomic_statements(result.final_response)
    r = vera.judge_relevancy(statements, query)
    if result.context is None:
        return r, None
    context_text = result.context.edited_text if result.context.edited_text is not None else result.context.original_text
    return r, vera.judge_adherence(statements, context_text)

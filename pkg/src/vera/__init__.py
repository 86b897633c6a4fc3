"""Validation and enhancement of retrieved context and generated responses in RAG pipelines."""

from .datasets import DocQASet, EvalExample, load_doc_qa, load_drop, load_squad2, sample
from .errors import VeraError
from .gateway import Cassette, ChatExchange, Gateway, MockBackend, ModelProfile, fingerprint
from .metrics import CANNOT_ANSWER, ComparisonReport, MetricSet, aggregate, emit_report, grade_answer
from .pipeline import AtomicStatement, PipelineResult, QueryCase, StageTrace, Vera
from .prompts import ParsedVerdict, PromptTemplate, Stage, TemplateSet, parse_verdict, render
from .retriever import (
    Chunk,
    ContextBundle,
    Document,
    HashingEmbedder,
    VectorIndex,
    chunk_document,
    embed,
    tokenize,
)
from .runner import RunConfig, run_eval

__version__ = "0.1.0"

__all__ = [
    "AtomicStatement",
    "CANNOT_ANSWER",
    "Cassette",
    "ChatExchange",
    "Chunk",
    "ComparisonReport",
    "ContextBundle",
    "DocQASet",
    "Document",
    "EvalExample",
    "Gateway",
    "HashingEmbedder",
    "MetricSet",
    "MockBackend",
    "ModelProfile",
    "ParsedVerdict",
    "PipelineResult",
    "PromptTemplate",
    "QueryCase",
    "RunConfig",
    "Stage",
    "StageTrace",
    "TemplateSet",
    "VectorIndex",
    "Vera",
    "VeraError",
    "aggregate",
    "chunk_document",
    "embed",
    "emit_report",
    "fingerprint",
    "grade_answer",
    "load_doc_qa",
    "load_drop",
    "load_squad2",
    "parse_verdict",
    "render",
    "run_eval",
    "sample",
    "tokenize",
]

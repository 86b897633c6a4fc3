"""Run configuration and the resumable batch evaluation behind ``vera eval``."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import yaml

from .datasets import EvalExample, load_dataset, load_doc_qa, sample
from .errors import ConfigurationError, VeraError
from .gateway import Cassette, Gateway, ModelProfile
from .metrics import ComparisonReport, MODES, aggregate, emit_report, exact_match, grade_answer
from .pipeline import PipelineResult, QueryCase, StageTrace, Vera
from .prompts import Stage, TemplateSet
from .retriever import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_OVERLAP,
    DEFAULT_TOP_K,
    ContextBundle,
    HashingEmbedder,
    HTTPEmbedder,
    VectorIndex,
    chunk_spans,
)
from .scripted import ScriptedWorld

logger = logging.getLogger(__name__)

RunMode = Literal["with_vera", "without_vera", "both"]

# fields that change how a run executes but not what it computes
_MECHANICS = ("worker_count", "cassette_path", "cassette_mode", "index_path")


@dataclass
class RunConfig:
    generator_profile: ModelProfile
    evaluator_profile: ModelProfile
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    top_k: int = DEFAULT_TOP_K
    mode: RunMode = "both"
    cassette_path: str | None = None
    cassette_mode: Literal["off", "record", "replay"] = "off"
    worker_count: int = 1
    seed: int = 0
    sample_size: int | None = None
    template_dir: str | None = None
    index_path: str | None = None
    dataset_name: str | None = None
    audit: bool = True
    embedder: dict = field(default_factory=lambda: {"kind": "hashing", "dim": 256, "seed": 0})
    # offline rule-based models for mock:generator / mock:evaluator endpoints
    scripted: dict | None = None

    def __post_init__(self) -> None:
        chunk_spans(0, self.chunk_size, self.overlap)
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if self.worker_count < 1:
            raise ConfigurationError("worker_count must be >= 1")
        if self.mode not in ("with_vera", "without_vera", "both"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.cassette_mode not in ("off", "record", "replay"):
            raise ConfigurationError(f"unknown cassette_mode {self.cassette_mode!r}")
        if self.cassette_mode != "off" and not self.cassette_path:
            raise ConfigurationError(f"cassette_mode={self.cassette_mode} needs cassette_path")
        if self.generator_profile.name == self.evaluator_profile.name:
            raise ConfigurationError("generator and evaluator profiles need distinct names")

    @property
    def modes(self) -> tuple[str, ...]:
        return MODES if self.mode == "both" else (self.mode,)

    def to_dict(self) -> dict:
        return {
            "generator_profile": self.generator_profile.to_dict(),
            "evaluator_profile": self.evaluator_profile.to_dict(),
            "chunk_size": self.chunk_size,
            "overlap": self.overlap,
            "top_k": self.top_k,
            "mode": self.mode,
            "cassette_path": self.cassette_path,
            "cassette_mode": self.cassette_mode,
            "worker_count": self.worker_count,
            "seed": self.seed,
            "sample_size": self.sample_size,
            "template_dir": self.template_dir,
            "index_path": self.index_path,
            "dataset_name": self.dataset_name,
            "audit": self.audit,
            "embedder": self.embedder,
            "scripted": self.scripted,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        try:
            gen = ModelProfile.from_dict({"role": "generator", **data.pop("generator_profile")})
            ev = ModelProfile.from_dict({"role": "evaluator", **data.pop("evaluator_profile")})
        except KeyError as exc:
            raise ConfigurationError(f"config lacks {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(generator_profile=gen, evaluator_profile=ev, **data)

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "RunConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        for key, value in (overrides or {}).items():
            set_dotted(data, key, value)
        return cls.from_dict(data)

    def content_hash(self, template_hash: str) -> str:
        """Hash of everything that determines per-query outputs."""
        d = {k: v for k, v in self.to_dict().items() if k not in _MECHANICS}
        blob = json.dumps({"config": d, "templates": template_hash}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def set_dotted(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def make_embedder(spec: dict):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dim=int(spec.get("dim", 256)), seed=int(spec.get("seed", 0)))
    if kind == "http":
        return HTTPEmbedder(spec["endpoint"], spec["model"], int(spec["dim"]), spec.get("api_key_env", "VERA_API_KEY"))
    raise ConfigurationError(f"unknown embedder kind {kind!r}")


def make_gateway(config: RunConfig) -> Gateway:
    cassette = None
    if config.cassette_mode == "replay":
        cassette = Cassette.load(config.cassette_path)
    elif config.cassette_mode == "record":
        p = Path(config.cassette_path)
        cassette = Cassette.load(p) if p.exists() else Cassette()
    gateway = Gateway(cassette=cassette, cassette_mode=config.cassette_mode)
    if config.scripted is not None:
        spec = dict(config.scripted)
        unknown = set(spec) - {"answers", "context_edits", "chit_chat"}
        if unknown:
            raise ConfigurationError(f"unknown scripted keys: {sorted(unknown)}")
        world = ScriptedWorld(
            answers=dict(spec.get("answers") or {}),
            context_edits=dict(spec.get("context_edits") or {}),
            chit_chat=set(spec.get("chit_chat") or ()),
        )
        world.install(gateway)
    return gateway


def open_index(path: str | Path, config: RunConfig) -> VectorIndex:
    if not Path(path).exists():
        raise ConfigurationError(f"index file {path} does not exist; run `vera ingest` first")
    return VectorIndex.load(path, make_embedder(config.embedder), config.chunk_size, config.overlap)


# --- evaluation ----------------------------------------------------------


@dataclass
class EvalOutcome:
    report: ComparisonReport
    results: dict[str, list[PipelineResult]]
    failed: int
    reused: int
    written: list[Path]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def trace_path(out_dir: Path, mode: str, example_id: str, config_hash: str) -> Path:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in example_id)
    return out_dir / "traces" / mode / f"{safe}__{config_hash[:12]}.json"


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def evaluate_example(
    vera: Vera,
    example: EvalExample,
    mode: str,
    gateway: Gateway,
) -> PipelineResult:
    query = QueryCase(example.example_id, example.question, example.gold_answers, example.unanswerable)
    context = None
    if example.provided_context is not None:
        context = ContextBundle.from_text(example.example_id, example.provided_context, vera.tokenizer)
    result = vera.run_pipeline(query, mode, context)
    if result.failed or not (example.gold_answers or example.unanswerable):
        return result
    result.metrics.exact_match = exact_match(result.final_response, example)
    try:
        grade = grade_answer(result.final_response, example, vera.evaluator, gateway, vera.templates)
    except VeraError as exc:
        result.error_stage = Stage.ANSWER_GRADING.value
        result.halted = True
        result.halt_reason = f"stage error in {Stage.ANSWER_GRADING.value}: {exc}"
        return result
    result.metrics.accuracy = grade.correct
    result.traces.append(StageTrace(Stage.ANSWER_GRADING.value, grade.exchanges, scores={"accuracy": float(grade.correct)}))
    return result


def load_examples(dataset_path: str | Path, kind: str, config: RunConfig) -> tuple[list[EvalExample], str | None]:
    corpus_ref = None
    if kind == "doc_qa":
        qa = load_doc_qa(dataset_path)
        examples, corpus_ref = qa.examples, qa.corpus_ref
    else:
        examples = load_dataset(dataset_path, kind)
    if config.sample_size is not None:
        examples = sample(examples, config.sample_size, config.seed)
    return examples, corpus_ref


def run_eval(
    config: RunConfig,
    dataset_path: str | Path,
    kind: str,
    out_dir: str | Path,
    gateway: Gateway | None = None,
) -> EvalOutcome:
    """Evaluate a dataset in every configured mode and write the report.

    Per-query trace files are keyed by (example_id, config hash); finished,
    non-failed ones are reused on rerun.
    """
    out = Path(out_dir)
    templates = TemplateSet.load(config.template_dir)
    config_hash = config.content_hash(templates.hash)
    examples, corpus_ref = load_examples(dataset_path, kind, config)
    if not examples:
        raise ConfigurationError(f"{dataset_path}: dataset holds no examples")

    index = None
    if kind == "doc_qa":
        index_path = config.index_path or (Path(dataset_path).parent / corpus_ref if corpus_ref else None)
        if index_path is None:
            raise ConfigurationError("doc_qa evaluation needs an index (index_path or corpus_ref)")
        index = open_index(index_path, config)

    own_gateway = gateway is None
    gateway = gateway or make_gateway(config)
    vera = Vera(gateway, config.generator_profile, config.evaluator_profile, templates, index, config.top_k, audit=config.audit)

    results: dict[str, list[PipelineResult]] = {}
    reused = 0
    try:
        for mode in config.modes:
            by_id: dict[str, PipelineResult] = {}
            todo: list[EvalExample] = []
            for ex in examples:
                path = trace_path(out, mode, ex.example_id, config_hash)
                if path.exists():
                    prior = PipelineResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
                    if not prior.failed:
                        by_id[ex.example_id] = prior
                        reused += 1
                        continue
                todo.append(ex)
            with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
                futures = {pool.submit(evaluate_example, vera, ex, mode, gateway): ex for ex in todo}
                # single collector: only this thread writes into out_dir
                for fut in as_completed(futures):
                    ex = futures[fut]
                    res = fut.result()
                    path = trace_path(out, mode, ex.example_id, config_hash)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(dump_json(res.to_dict()), encoding="utf-8")
                    by_id[ex.example_id] = res
            results[mode] = [by_id[ex.example_id] for ex in examples]
    finally:
        if own_gateway and config.cassette_mode == "record":
            gateway.cassette.save(config.cassette_path)

    snapshot = config.to_dict()
    snapshot["config_hash"] = config_hash
    report = ComparisonReport(
        dataset_name=config.dataset_name or Path(dataset_path).stem,
        model_name=config.generator_profile.model_name,
        evaluator_name=config.evaluator_profile.model_name,
        rows={mode: aggregate(results[mode]) for mode in config.modes},
        template_set_hash=templates.hash,
        config_snapshot=snapshot,
    )
    written = emit_report(report, out)
    run_meta = out / "run.json"
    run_meta.write_text(
        dump_json({"config": config.to_dict(), "config_hash": config_hash, "dataset": str(dataset_path), "kind": kind,
                   "example_ids": [ex.example_id for ex in examples], "report": report.to_dict()}),
        encoding="utf-8",
    )
    failed = sum(r.failed for rs in results.values() for r in rs)
    return EvalOutcome(report, results, failed, reused, written + [run_meta])


def rerender_report(out_dir: str | Path, formats=("json", "markdown", "csv")) -> ComparisonReport:
    """Rebuild the report from the trace files recorded by a previous ``run_eval``."""
    out = Path(out_dir)
    meta_path = out / "run.json"
    if not meta_path.exists():
        raise ConfigurationError(f"{out} holds no run.json; nothing to re-render")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    prior = ComparisonReport.from_dict(meta["report"])
    rows = {}
    for mode in prior.rows:
        results = []
        for ex_id in meta["example_ids"]:
            path = trace_path(out, mode, ex_id, meta["config_hash"])
            if not path.exists():
                raise ConfigurationError(f"missing trace {path}")
            results.append(PipelineResult.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        rows[mode] = aggregate(results)
    report = ComparisonReport(prior.dataset_name, prior.model_name, prior.evaluator_name, rows,
                              prior.template_set_hash, prior.config_snapshot)
    emit_report(report, out, formats)
    return report

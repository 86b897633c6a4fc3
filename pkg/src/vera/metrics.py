"""Per-query metric sets, dataset aggregation, answer grading and report files."""

from __future__ import annotations

import csv
import io
import json
import re
import string
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

from .gateway import ChatExchange, Gateway, ModelProfile
from .prompts import Stage, TemplateSet, ask

if TYPE_CHECKING:
    from .datasets import EvalExample
    from .pipeline import PipelineResult

CANNOT_ANSWER = "Query cannot be answered with retrieved context"
ABSENT = "n/a"

METRICS = ("context_relevance", "response_relevance", "response_adherence", "accuracy", "exact_match")
VERA_METRICS = ("response_adherence", "response_relevance", "context_relevance")
METRIC_LABELS = {
    "response_adherence": "Response Adherence",
    "response_relevance": "Response Relevance",
    "context_relevance": "Context Relevance",
    "accuracy": "Accuracy",
    "exact_match": "Exact Match",
}
MODES = ("without_vera", "with_vera")
MODE_LABELS = {"without_vera": "Without VERA", "with_vera": "With VERA"}


@dataclass
class MetricSet:
    """Scores of one query.  ``None`` means the producing stage did not run."""

    context_relevance: float | None = None
    response_relevance: float | None = None
    response_adherence: float | None = None
    accuracy: int | None = None
    exact_match: int | None = None
    statement_count: int = 0

    def __post_init__(self) -> None:
        for name in ("context_relevance", "response_relevance", "response_adherence"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("accuracy", "exact_match"):
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {v}")

    def to_dict(self) -> dict:
        return {
            "context_relevance": self.context_relevance,
            "response_relevance": self.response_relevance,
            "response_adherence": self.response_adherence,
            "accuracy": self.accuracy,
            "exact_match": self.exact_match,
            "statement_count": self.statement_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSet":
        return cls(**{k: d.get(k) for k in METRICS}, statement_count=d.get("statement_count", 0))


@dataclass
class MeanMetricSet:
    """Dataset-level means with the number of queries behind each."""

    means: dict[str, float | None]
    counts: dict[str, int]
    queries: int
    failed: int = 0

    def get(self, metric: str) -> float | None:
        return self.means.get(metric)

    def to_dict(self) -> dict:
        return {
            "queries": self.queries,
            "failed": self.failed,
            "metrics": {m: {"mean": self.means.get(m), "count": self.counts.get(m, 0)} for m in METRICS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeanMetricSet":
        metrics = d["metrics"]
        return cls(
            {m: metrics[m]["mean"] for m in metrics},
            {m: metrics[m]["count"] for m in metrics},
            d["queries"],
            d.get("failed", 0),
        )


def mean_of(values: Iterable[float]) -> float | None:
    """Exact rational mean of floats, converted once at the end."""
    total = Fraction(0)
    n = 0
    for v in values:
        total += Fraction(v)
        n += 1
    return float(total / n) if n else None


def aggregate(results: Sequence["PipelineResult | MetricSet"]) -> MeanMetricSet:
    if not results:
        raise ValueError("aggregate needs at least one result")
    sets = [r if isinstance(r, MetricSet) else r.metrics for r in results]
    failed = sum(1 for r in results if getattr(r, "error_stage", None))
    means: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    for m in METRICS:
        vals = [getattr(s, m) for s in sets if getattr(s, m) is not None]
        means[m] = mean_of(vals)
        counts[m] = len(vals)
    return MeanMetricSet(means, counts, len(results), failed)


# --- answer grading ------------------------------------------------------


def normalize_answer(s: str) -> str:
    """SQuAD-style normalization: lower case, drop punctuation, articles and extra spaces."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in set(string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def exact_match(response: str, example: "EvalExample") -> int:
    if example.unanswerable:
        return int(response.strip() == CANNOT_ANSWER or not normalize_answer(response))
    norm = normalize_answer(response)
    return int(any(norm == normalize_answer(g) for g in example.gold_answers))


@dataclass
class GradeResult:
    correct: int
    exchanges: list[ChatExchange] = field(default_factory=list)
    rationale: str = ""


def grade_answer(
    final_response: str,
    example: "EvalExample",
    judge: ModelProfile,
    gateway: Gateway,
    templates: TemplateSet,
) -> GradeResult:
    """Judged correctness: 1 when the response matches a gold answer in meaning.

    Abstaining with the cannot-answer message is correct exactly when the
    example is unanswerable; those cases skip the judge.
    """
    if not example.gold_answers and not example.unanswerable:
        raise ValueError(f"{example.example_id}: no gold answers and not unanswerable; nothing to grade against")
    abstained = final_response.strip() == CANNOT_ANSWER
    if abstained:
        return GradeResult(int(example.unanswerable), [], "abstention rule")
    gold = "; ".join(example.gold_answers) if not example.unanswerable else "(unanswerable: the correct response declines to answer)"
    verdict, exchanges = ask(
        gateway,
        judge,
        templates[Stage.ANSWER_GRADING],
        {"query": example.question, "gold": gold, "response": final_response},
    )
    return GradeResult(int(verdict.payload), exchanges, verdict.rationale)


# --- reports -------------------------------------------------------------


@dataclass
class ComparisonReport:
    dataset_name: str
    model_name: str
    evaluator_name: str
    rows: dict[str, MeanMetricSet]
    template_set_hash: str
    config_snapshot: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "model_name": self.model_name,
            "evaluator_name": self.evaluator_name,
            "template_set_hash": self.template_set_hash,
            "rows": {mode: self.rows[mode].to_dict() for mode in MODES if mode in self.rows},
            "config_snapshot": self.config_snapshot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(
            d["dataset_name"],
            d["model_name"],
            d["evaluator_name"],
            {m: MeanMetricSet.from_dict(r) for m, r in d["rows"].items()},
            d["template_set_hash"],
            d.get("config_snapshot", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def fmt_cell(mean: float | None, count: int | None = None) -> str:
    if mean is None:
        return ABSENT
    text = f"{mean:.3f}"
    return f"{text} (n={count})" if count is not None else text


def _present(reports: Sequence[ComparisonReport], metric: str) -> bool:
    return any(r.rows[m].counts.get(metric, 0) for r in reports for m in r.rows)


def is_accuracy_only(reports: Sequence[ComparisonReport]) -> bool:
    return not any(_present(reports, m) for m in VERA_METRICS) and _present(reports, "accuracy")


def render_markdown(reports: Sequence[ComparisonReport]) -> str:
    """Table per dataset: metrics x {without, with} rows, one column per model.

    Accuracy-only reports collapse to one row per model (and ``+ VERA``) with
    the dataset as the column.
    """
    if not reports:
        raise ValueError("nothing to render")
    lines: list[str] = []
    if is_accuracy_only(reports):
        datasets = sorted({r.dataset_name for r in reports})
        lines.append("| | " + " | ".join(datasets) + " |")
        lines.append("|---|" + "---|" * len(datasets))
        models = sorted({r.model_name for r in reports})
        for mode in MODES:
            for model in models:
                label = model if mode == "without_vera" else f"{model} + VERA"
                cells = []
                for ds in datasets:
                    rep = next((r for r in reports if r.model_name == model and r.dataset_name == ds), None)
                    row = rep.rows.get(mode) if rep else None
                    cells.append(fmt_cell(row.get("accuracy"), row.counts.get("accuracy")) if row else ABSENT)
                if any(c != ABSENT for c in cells):
                    lines.append(f"| **{label}** | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    metrics = list(VERA_METRICS) + [m for m in ("accuracy", "exact_match") if _present(reports, m)]
    for ds in sorted({r.dataset_name for r in reports}):
        group = sorted((r for r in reports if r.dataset_name == ds), key=lambda r: r.model_name)
        lines.append(f"### {ds}")
        lines.append("")
        lines.append("| | | " + " | ".join(r.model_name for r in group) + " |")
        lines.append("|---|---|" + "---|" * len(group))
        for mode in MODES:
            if not any(mode in r.rows for r in group):
                continue
            for i, metric in enumerate(metrics):
                head = f"**{MODE_LABELS[mode]}**" if i == 0 else ""
                cells = []
                for r in group:
                    row = r.rows.get(mode)
                    cells.append(fmt_cell(row.get(metric), row.counts.get(metric)) if row else ABSENT)
                lines.append(f"| {head} | {METRIC_LABELS[metric]} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def render_csv(reports: Sequence[ComparisonReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "model", "evaluator", "mode", "metric", "mean", "count", "queries", "failed"])
    for r in sorted(reports, key=lambda r: (r.dataset_name, r.model_name)):
        for mode in MODES:
            row = r.rows.get(mode)
            if row is None:
                continue
            for metric in METRICS:
                mean = row.get(metric)
                w.writerow([
                    r.dataset_name, r.model_name, r.evaluator_name, mode, metric,
                    ABSENT if mean is None else f"{mean:.3f}",
                    row.counts.get(metric, 0), row.queries, row.failed,
                ])
    return buf.getvalue()


def emit_report(
    report: ComparisonReport,
    out_dir: str | Path,
    formats: Iterable[str] = ("json", "markdown", "csv"),
) -> list[Path]:
    """Write report.json / report.md / report.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in sorted(set(formats)):
        if fmt == "json":
            path, text = out / "report.json", report.to_json()
        elif fmt in ("markdown", "md", "markdown-table"):
            path, text = out / "report.md", _markdown_document(report)
        elif fmt == "csv":
            path, text = out / "report.csv", render_csv([report])
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)
    return written


def _markdown_document(report: ComparisonReport) -> str:
    header = [
        f"# {report.dataset_name}: {report.model_name}",
        "",
        f"- evaluator: {report.evaluator_name}",
        f"- template set: `{report.template_set_hash[:16]}`",
    ]
    for mode in MODES:
        row = report.rows.get(mode)
        if row is not None:
            header.append(f"- {MODE_LABELS[mode]}: {row.queries} queries, {row.failed} failed")
    return "\n".join(header) + "\n\n" + render_markdown([report])

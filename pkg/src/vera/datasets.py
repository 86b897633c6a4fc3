"""Loaders for SQuAD-2.0, DROP and JSON-lines document-QA sets, plus seeded sampling."""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import asdict, dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Literal, Sequence

from .errors import DatasetFormatError, DatasetFormatWarning

Source = Literal["squad2", "drop", "doc_qa"]


@dataclass(frozen=True)
class EvalExample:
    example_id: str
    question: str
    gold_answers: tuple[str, ...] = ()
    unanswerable: bool = False
    source: Source = "doc_qa"
    provided_context: str | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError(f"{self.example_id}: empty question")
        if self.unanswerable and self.gold_answers:
            raise ValueError(f"{self.example_id}: unanswerable example must not carry gold answers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gold_answers"] = list(self.gold_answers)
        return d


@dataclass
class DocQASet:
    corpus_ref: str
    examples: list[EvalExample] = field(default_factory=list)
    composition_note: str = ""


def _require(obj: Any, key: str, kind: type | tuple[type, ...], path: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(path, f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        expected = " or ".join(k.__name__ for k in kind) if isinstance(kind, tuple) else kind.__name__
        raise DatasetFormatError(f"{path}.{key}", f"expected {expected}, got {type(value).__name__}")
    return value


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(str(path), f"not valid JSON: {exc}") from exc


# --- SQuAD 2.0 -----------------------------------------------------------


def load_squad2(path: str | Path) -> list[EvalExample]:
    """One example per QA pair, in file order; the paragraph becomes the provided context."""
    data = _read_json(path)
    articles = _require(data, "data", list, "$")
    out: list[EvalExample] = []
    for a, article in enumerate(articles):
        apath = f"data[{a}]"
        for p, para in enumerate(_require(article, "paragraphs", list, apath)):
            ppath = f"{apath}.paragraphs[{p}]"
            context = _require(para, "context", str, ppath)
            for q, qa in enumerate(_require(para, "qas", list, ppath)):
                qpath = f"{ppath}.qas[{q}]"
                qid = str(_require(qa, "id", str, qpath))
                question = _require(qa, "question", str, qpath)
                impossible = bool(qa.get("is_impossible", False))
                golds: list[str] = []
                if not impossible:
                    for i, ans in enumerate(_require(qa, "answers", list, qpath)):
                        text = _require(ans, "text", str, f"{qpath}.answers[{i}]")
                        start = ans.get("answer_start")
                        if isinstance(start, int) and context[start : start + len(text)] != text:
                            warnings.warn(
                                f"{qpath}.answers[{i}]: text {text!r} does not match context at offset {start}",
                                DatasetFormatWarning,
                                stacklevel=2,
                            )
                        if text not in golds:
                            golds.append(text)
                    if not golds:
                        raise DatasetFormatError(qpath, "answerable question without answers")
                out.append(EvalExample(qid, question, tuple(golds), impossible, "squad2", context))
    return out


# --- DROP ----------------------------------------------------------------


def canonical_number(value: str) -> str:
    """``"5.0"`` -> ``"5"``, ``"1,200"`` -> ``"1200"``; unparseable text is kept stripped."""
    text = value.strip().replace(",", "")
    try:
        d = Decimal(text)
    except InvalidOperation:
        return value.strip()
    if d == d.to_integral_value():
        return str(int(d))
    return format(d.normalize(), "f")


def canonical_date(date: dict) -> str:
    """Present components in ``day month year`` order, space separated."""
    parts = [str(date.get(k, "")).strip() for k in ("day", "month", "year")]
    return " ".join(p for p in parts if p)


def normalize_drop_answer(answer: dict) -> list[str]:
    number = str(answer.get("number", "") or "").strip()
    if number:
        return [canonical_number(number)]
    spans = [s.strip() for s in answer.get("spans") or [] if s and s.strip()]
    if spans:
        return spans
    date = answer.get("date") or {}
    d = canonical_date(date) if isinstance(date, dict) else ""
    return [d] if d else []


def load_drop(path: str | Path) -> list[EvalExample]:
    """One example per question; golds from the answer plus validated answers, deduplicated."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise DatasetFormatError("$", "expected an object keyed by passage id")
    out: list[EvalExample] = []
    for pid, entry in data.items():
        ppath = f"{pid}"
        passage = _require(entry, "passage", str, ppath)
        for q, qa in enumerate(_require(entry, "qa_pairs", list, ppath)):
            qpath = f"{ppath}.qa_pairs[{q}]"
            question = _require(qa, "question", str, qpath)
            qid = str(qa.get("query_id") or f"{pid}-{q}")
            golds: list[str] = []
            answers = [_require(qa, "answer", dict, qpath)] + list(qa.get("validated_answers") or [])
            for ans in answers:
                for g in normalize_drop_answer(ans):
                    if g not in golds:
                        golds.append(g)
            if not golds:
                raise DatasetFormatError(f"{qpath}.answer", "answer has no number, spans or date")
            out.append(EvalExample(qid, question, tuple(golds), False, "drop", passage))
    return out


# --- document QA ---------------------------------------------------------


def load_doc_qa(path: str | Path, composition_note: str = "") -> DocQASet:
    """JSON lines of {example_id, question, gold_answers?, corpus_ref}; all lines share one corpus."""
    examples: list[EvalExample] = []
    refs: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        lpath = f"line {lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lpath, f"not valid JSON: {exc}") from exc
        if not isinstance(rec, dict):
            raise DatasetFormatError(lpath, "expected a JSON object")
        qid = str(_require(rec, "example_id", (str, int), lpath))
        question = _require(rec, "question", str, lpath)
        refs.add(_require(rec, "corpus_ref", str, lpath))
        golds = rec.get("gold_answers") or []
        if not isinstance(golds, list) or not all(isinstance(g, str) for g in golds):
            raise DatasetFormatError(f"{lpath}.gold_answers", "expected a list of strings")
        examples.append(EvalExample(qid, question, tuple(golds), False, "doc_qa"))
    if len(refs) > 1:
        raise DatasetFormatError(str(path), f"examples reference several corpora: {sorted(refs)}")
    return DocQASet(refs.pop() if refs else "", examples, composition_note)


def load_dataset(path: str | Path, kind: str) -> list[EvalExample]:
    if kind == "squad2":
        return load_squad2(path)
    if kind == "drop":
        return load_drop(path)
    if kind == "doc_qa":
        return load_doc_qa(path).examples
    raise ValueError(f"unknown dataset kind {kind!r}")


def sample(examples: Sequence[EvalExample], n: int, seed: int) -> list[EvalExample]:
    """Seeded sample without replacement (Python's Mersenne Twister, platform independent)."""
    if n < 1 or n > len(examples):
        raise ValueError(f"cannot sample {n} of {len(examples)} examples")
    return random.Random(seed).sample(list(examples), n)

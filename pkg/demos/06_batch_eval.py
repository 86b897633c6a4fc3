"""Evaluate the demo question set in both modes, then resume and replay the run."""

from __future__ import annotations

import tempfile
from pathlib import Path

from vera import RunConfig, VectorIndex, run_eval
from vera.retriever import load_corpus
from vera.runner import make_embedder

HERE = Path(__file__).parent
work = Path(tempfile.mkdtemp())
cassette = work / "calls.jsonl"

config = RunConfig.load(HERE / "scripted.yaml", {
    "index_path": str(work / "corpus.index.json"),
    "cassette_mode": "record",
    "cassette_path": str(cassette),
    "worker_count": 4,
})

index = VectorIndex(make_embedder(config.embedder), config.chunk_size, config.overlap)
index.add_documents(load_corpus(HERE / "data" / "corpus.jsonl"))
index.save(config.index_path)

first = run_eval(config, HERE / "data" / "questions.jsonl", "doc_qa", work / "run")
print((work / "run" / "report.md").read_text())
print("failed:", first.failed)

# a rerun with the same config reuses every finished trace
again = run_eval(config, HERE / "data" / "questions.jsonl", "doc_qa", work / "run")
print("reused traces on rerun:", again.reused)

# replay answers every model call from the cassette, with no models registered
replay_cfg = RunConfig.load(HERE / "scripted.yaml", {
    "index_path": config.index_path, "cassette_mode": "replay", "cassette_path": str(cassette), "scripted": None,
})
run_eval(replay_cfg, HERE / "data" / "questions.jsonl", "doc_qa", work / "replay")
same = (work / "run" / "report.md").read_text() == (work / "replay" / "report.md").read_text()
print("replayed report matches:", same)

from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from vera.gateway import Gateway
from vera.prompts import TemplateSet
from vera.retriever import Document, HashingEmbedder, VectorIndex
from vera.scripted import ScriptedWorld

COUNTRIES = [
    ("Zorbia", "Quellton", "copper"),
    ("Marvonia", "Estrel", "timber"),
    ("Tandria", "Voss", "wool"),
    ("Kelmark", "Orvieth", "salt"),
    ("Brisca", "Lunetto", "olives"),
    ("Ostrava Minor", "Pell", "glass"),
    ("Quarn", "Dunmere", "amber"),
    ("Velland", "Sorrow Bay", "fish"),
    ("Ithren", "Calder", "silver"),
    ("Rookvale", "Ashby", "coal"),
]

FILLER = [
    "Weather patterns in the northern valleys vary widely between seasons.",
    "Many travellers remark on the quality of roadside inns.",
    "Local festivals often feature music and long communal dinners.",
    "Historians disagree about the origin of several place names.",
]


def country_doc(name: str, capital: str, export: str) -> Document:
    body = " ".join(
        [
            f"The capital of {name} is {capital}.",
            FILLER[len(name) % 4],
            f"The main export of {name} is {export}.",
            FILLER[(len(name) + 1) % 4],
            f"{capital} hosts the national parliament of {name}.",
        ]
    )
    return Document(name.lower().replace(" ", "_"), name, body)


def country_docs() -> list[Document]:
    return [country_doc(*c) for c in COUNTRIES]


def doc_qa_records(corpus_ref: str = "corpus.index.json") -> list[dict]:
    recs = []
    for i, (name, capital, export) in enumerate(COUNTRIES):
        recs.append({"example_id": f"cap-{i:02d}", "question": f"What is the capital of {name}?",
                     "gold_answers": [capital], "corpus_ref": corpus_ref})
        recs.append({"example_id": f"exp-{i:02d}", "question": f"What is the main export of {name}?",
                     "gold_answers": [export], "corpus_ref": corpus_ref})
    return recs


def scripted_answers() -> dict[str, str]:
    """Generator transcripts that mix relevant, irrelevant and wrong statements."""
    answers = {}
    for i, (name, capital, export) in enumerate(COUNTRIES):
        if i % 3 == 0:
            answers[f"What is the capital of {name}?"] = (
                f"The capital of {name} is {capital}. Cats are popular pets. The capital of {name} is Nowhere City."
            )
        elif i % 3 == 1:
            answers[f"What is the main export of {name}?"] = (
                f"The main export of {name} is rubber. Weather is often pleasant."
            )
    return answers


def write_config(path: Path, **overrides) -> Path:
    """A run config whose models are the offline scripted rules."""
    data = {
        "generator_profile": {"name": "scripted-generator", "endpoint": "mock:generator"},
        "evaluator_profile": {"name": "scripted-evaluator", "endpoint": "mock:evaluator"},
        "chunk_size": 64,
        "overlap": 8,
        "top_k": 2,
        "dataset_name": "countries",
        "scripted": {"answers": scripted_answers()},
    }
    data.update(overrides)
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def templates() -> TemplateSet:
    return TemplateSet.load()


@pytest.fixture
def world() -> ScriptedWorld:
    return ScriptedWorld(answers=scripted_answers())


@pytest.fixture
def gateway() -> Gateway:
    return Gateway()


@pytest.fixture
def profiles(world, gateway):
    return world.install(gateway)


@pytest.fixture(scope="session")
def country_index() -> VectorIndex:
    idx = VectorIndex(HashingEmbedder(dim=256, seed=0), chunk_size=64, overlap=8)
    idx.add_documents(country_docs())
    return idx


@pytest.fixture
def doc_qa_dir(tmp_path: Path) -> Path:
    """A 20-question doc_qa set next to its persisted index."""
    idx = VectorIndex(HashingEmbedder(dim=256, seed=0), chunk_size=64, overlap=8)
    idx.add_documents(country_docs())
    idx.save(tmp_path / "corpus.index.json")
    with open(tmp_path / "questions.jsonl", "w", encoding="utf-8") as fh:
        for rec in doc_qa_records():
            fh.write(json.dumps(rec) + "\n")
    return tmp_path


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

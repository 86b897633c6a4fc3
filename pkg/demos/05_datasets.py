"""Load SQuAD 2.0 and DROP style files, then take a seeded sample."""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from vera import load_doc_qa, load_drop, load_squad2, sample

tmp = Path(tempfile.mkdtemp())
context = "The Normans were in Normandy in the 10th century."

squad = {"version": "v2.0", "data": [{"title": "Normans", "paragraphs": [{"context": context, "qas": [
    {"id": "s1", "question": "Where were the Normans?", "is_impossible": False,
     "answers": [{"text": "Normandy", "answer_start": context.index("Normandy")}]},
    {"id": "s2", "question": "Who ruled Mars?", "is_impossible": True, "answers": []},
]}]}]}
(tmp / "squad.json").write_text(json.dumps(squad))
for ex in load_squad2(tmp / "squad.json"):
    print(f"squad2 {ex.example_id}: gold={ex.gold_answers} unanswerable={ex.unanswerable}")

blank = {"day": "", "month": "", "year": ""}
drop = {"nfl_1": {"passage": "The Bears scored 3 field goals on 7 December 1941.", "qa_pairs": [
    {"query_id": "d1", "question": "How many field goals?", "answer": {"number": "3.0", "spans": [], "date": blank}},
    {"query_id": "d2", "question": "When?", "answer": {"number": "", "spans": [],
                                                       "date": {"day": "7", "month": "December", "year": "1941"}}},
]}}
(tmp / "drop.json").write_text(json.dumps(drop))
for ex in load_drop(tmp / "drop.json"):
    print(f"drop {ex.example_id}: gold={ex.gold_answers}")

qs = load_doc_qa(Path(__file__).parent / "data" / "questions.jsonl")
print(f"doc_qa: {len(qs.examples)} questions against {qs.corpus_ref}")

# same seed, same subset, on any platform
picked = sample(qs.examples, 5, seed=42)
print("sample(5, seed=42):", [e.example_id for e in picked])

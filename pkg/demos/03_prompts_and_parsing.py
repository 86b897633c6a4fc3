"""Render a stage template and parse loosely formatted judge answers."""

from __future__ import annotations

from vera import Stage, TemplateSet, parse_verdict, render
from vera.errors import VeraError

templates = TemplateSet.default()
print("template set digest:", templates.hash[:12])

msgs = render(templates[Stage.RELEVANCY_JUDGE], {
    "query": "What is the capital of Zorbia?",
    "statements": "[1] The capital of Zorbia is Quellton.\n[2] Cats are popular pets.",
})
print(f"{len(msgs)} messages; roles: {[role for role, _ in msgs]}")
print("live instance:\n" + msgs[-1][1])

# JSON may be wrapped in prose or a code fence
raw = ('Sure.\n```json\n{"judgments": [{"index": 1, "rationale": "answers it", "label": 1},'
       ' {"index": 2, "rationale": "off topic", "label": 0}]}\n```')
verdict = parse_verdict(Stage.RELEVANCY_JUDGE, raw, expected_count=2)
for label in verdict.payload:
    print(f"  [{label.index}] label={label.label} ({label.rationale})")

try:
    parse_verdict(Stage.RELEVANCY_JUDGE, raw, expected_count=3)
except VeraError as exc:
    print("rejected:", exc)

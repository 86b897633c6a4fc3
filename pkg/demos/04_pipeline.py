"""Answer one question with and without VERA using the scripted offline models."""

from __future__ import annotations

from pathlib import Path

from vera import Gateway, HashingEmbedder, QueryCase, VectorIndex, Vera
from vera.retriever import load_corpus
from vera.scripted import ScriptedWorld

DATA = Path(__file__).parent / "data"
QUESTION = "What is the capital of Zorbia?"

index = VectorIndex(HashingEmbedder(dim=256), chunk_size=64, overlap=8)
index.add_documents(load_corpus(DATA / "corpus.jsonl"))

# the generator answer mixes a grounded, an off-topic and an ungrounded statement
world = ScriptedWorld(
    answers={QUESTION: "The capital of Zorbia is Quellton. Cats are popular pets. The capital of Zorbia is Nowhere City."},
    chit_chat={"Hi there!"},
)
gw = Gateway()
generator, evaluator = world.install(gw)
vera = Vera(gw, generator, evaluator, index=index, top_k=2)

# without_vera scores the raw answer; with_vera also applies the edits
for mode in ("without_vera", "with_vera"):
    result = vera.run_pipeline(QueryCase("q1", QUESTION), mode=mode)
    m = result.metrics
    print(f"--- {mode}")
    print(f"context relevance {m.context_relevance}  response relevance {m.response_relevance}"
          f"  adherence {m.response_adherence}")
    for s in result.statements:
        after = f" -> {s.rewritten_text}" if s.edit_action == "rewrite" else ""
        print(f"  [{s.index}] r={s.relevance} {s.adherence_class} {s.edit_action}: {s.text}{after}")
    print("final:", result.final_response)

# chit-chat skips retrieval and the editing stages that depend on it
small_talk = vera.run_pipeline(QueryCase("q2", "Hi there!"))
print("--- chit-chat: retrieval used =", small_talk.retrieval_used)

# an edited context with nothing left halts before the generator is called
halting = ScriptedWorld(context_edits={"Who won the 1930 chess open?": ""})
gw2 = Gateway()
g2, e2 = halting.install(gw2)
halted = Vera(gw2, g2, e2, index=index, top_k=2).run_pipeline(QueryCase("q3", "Who won the 1930 chess open?"))
print("--- halted:", halted.halted, "|", halted.final_response, "| generator calls:", halted.generator_calls())

"""Chunk a small corpus, build an exact cosine index and retrieve for a query."""

from __future__ import annotations

from pathlib import Path

from vera import HashingEmbedder, VectorIndex, chunk_document, tokenize
from vera.retriever import load_corpus

DATA = Path(__file__).parent / "data"

docs = load_corpus(DATA / "corpus.jsonl")
print(f"{len(docs)} documents, first: {docs[0].title!r}")

# chunking is token based: windows of chunk_size with the given overlap
chunks = chunk_document(docs[0], chunk_size=16, overlap=4)
for c in chunks[:3]:
    print(f"  {c.chunk_id} tokens {c.token_span}: {c.text[:50]!r}")
print("tokens:", tokenize("Quellton's port, est. 1820!"))

index = VectorIndex(HashingEmbedder(dim=256), chunk_size=64, overlap=8)
print("chunks indexed:", index.add_documents(docs))

bundle = index.retrieve("What is the capital of Zorbia?", k=2, query_id="demo")
for chunk, score in bundle.chunks:
    print(f"  {score:.3f}  {chunk.chunk_id}  {chunk.text[:60]!r}")
print("context tokens:", bundle.original_token_count)

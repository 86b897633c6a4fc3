"""Token chunking, embedding and exact cosine top-k retrieval."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    ConfigurationError,
    EmbeddingUnavailableError,
    EmptyCorpusError,
    IndexConfigMismatchError,
    InvalidChunkConfigError,
)

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 512
DEFAULT_OVERLAP = 25
DEFAULT_TOP_K = 4


# --- tokenization --------------------------------------------------------


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[str]: ...


class WordPunctTokenizer:
    """Word runs and single punctuation marks, each carrying its leading whitespace.

    ``"".join(tokenize(text)) == text.rstrip()``: the only normalization is
    that trailing whitespace is dropped.
    """

    name = "wordpunct-v1"
    _pattern = re.compile(r"\s*(?:\w+|[^\w\s])")

    def tokenize(self, text: str) -> list[str]:
        return self._pattern.findall(text)

    def count(self, text: str) -> int:
        return len(self.tokenize(text))


DEFAULT_TOKENIZER = WordPunctTokenizer()


def tokenize(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> list[str]:
    return tokenizer.tokenize(text)


def count_tokens(text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> int:
    return len(tokenizer.tokenize(text))


# --- documents and chunks ------------------------------------------------


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    source_uri: str | None = None

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.doc_id!r} has an empty body")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    token_span: tuple[int, int]
    text: str
    token_count: int

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "token_span": list(self.token_span),
            "text": self.text,
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(d["chunk_id"], d["doc_id"], tuple(d["token_span"]), d["text"], int(d["token_count"]))


def chunk_spans(total: int, chunk_size: int, overlap: int) -> list[tuple[int, int]]:
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise InvalidChunkConfigError(f"need 0 <= overlap < chunk_size, got chunk_size={chunk_size} overlap={overlap}")
    stride = chunk_size - overlap
    spans = []
    start = 0
    while start < total:
        end = min(start + chunk_size, total)
        spans.append((start, end))
        if end == total:
            break
        start += stride
    return spans


def chunk_document(
    doc: Document,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
) -> list[Chunk]:
    tokens = tokenizer.tokenize(doc.body)
    chunks = []
    for i, (start, end) in enumerate(chunk_spans(len(tokens), chunk_size, overlap)):
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}#{i:05d}",
                doc_id=doc.doc_id,
                token_span=(start, end),
                text="".join(tokens[start:end]),
                token_count=end - start,
            )
        )
    return chunks


# --- embedding -----------------------------------------------------------


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Seeded signed feature hashing over lower-cased tokens and token bigrams.

    Each feature is hashed with BLAKE2b (keyed by the seed); the first 8
    bytes pick the bucket, the next byte the sign.  Bigrams weigh half.
    """

    def __init__(self, dim: int = 256, seed: int = 0, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> None:
        if dim <= 0:
            raise ConfigurationError("embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self.tokenizer = tokenizer
        self.name = f"hashing-d{dim}-s{seed}"
        self._key = str(seed).encode("utf-8")

    def _feature(self, feature: str) -> tuple[int, float]:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=9, key=self._key).digest()
        bucket = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return bucket, sign

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        words = [t.strip().lower() for t in self.tokenizer.tokenize(text)]
        for w in words:
            b, s = self._feature("u:" + w)
            vec[b] += s
        for a, c in zip(words, words[1:]):
            b, s = self._feature(f"b:{a} {c}")
            vec[b] += 0.5 * s
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_one(t) for t in texts])

    def describe(self) -> dict:
        return {"kind": "hashing", "dim": self.dim, "seed": self.seed, "tokenizer": self.tokenizer.name}


class HTTPEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, dim: int, api_key_env: str = "VERA_API_KEY", timeout: float = 60.0) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.name = f"http-{model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        key = os.environ.get(self.api_key_env)
        if not key:
            raise EmbeddingUnavailableError(f"environment variable {self.api_key_env} is not set")
        try:
            resp = httpx.post(
                self.endpoint + "/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            rows = sorted(resp.json()["data"], key=lambda r: r["index"])
            out = np.asarray([r["embedding"] for r in rows], dtype=np.float64)
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise EmbeddingUnavailableError(str(exc)) from exc
        if out.shape != (len(texts), self.dim):
            raise EmbeddingUnavailableError(f"expected shape {(len(texts), self.dim)}, got {out.shape}")
        return out

    def describe(self) -> dict:
        return {"kind": "http", "endpoint": self.endpoint, "model": self.model, "dim": self.dim}


def embed(texts: Sequence[str], embedder: Embedder) -> list[np.ndarray]:
    try:
        matrix = embedder.embed(list(texts))
    except EmbeddingUnavailableError:
        raise
    except Exception as exc:
        raise EmbeddingUnavailableError(f"{embedder.name}: {exc}") from exc
    return [row for row in matrix]


@dataclass(frozen=True)
class EmbeddedChunk:
    chunk: Chunk
    vector: np.ndarray
    norm: float


# --- context bundle ------------------------------------------------------


@dataclass
class ContextBundle:
    query_id: str
    chunks: list[tuple[Chunk, float]]
    original_token_count: int
    edited_text: str | None = None
    edited_token_count: int | None = None

    @property
    def original_text(self) -> str:
        return "\n\n".join(c.text.strip() for c, _ in self.chunks)

    @property
    def similarities(self) -> list[float]:
        return [s for _, s in self.chunks]

    @classmethod
    def from_text(cls, query_id: str, text: str, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> "ContextBundle":
        """Wrap an inline passage (datasets that ship their own context)."""
        n = count_tokens(text, tokenizer)
        chunk = Chunk(f"{query_id}#ctx", query_id, (0, n), text, n)
        return cls(query_id, [(chunk, 1.0)], n)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "chunks": [{**c.to_dict(), "similarity": s} for c, s in self.chunks],
            "original_token_count": self.original_token_count,
            "edited_text": self.edited_text,
            "edited_token_count": self.edited_token_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextBundle":
        chunks = [(Chunk.from_dict(c), float(c["similarity"])) for c in d["chunks"]]
        return cls(d["query_id"], chunks, d["original_token_count"], d.get("edited_text"), d.get("edited_token_count"))


# --- index ---------------------------------------------------------------


@dataclass
class IndexConfig:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    tokenizer: str = DEFAULT_TOKENIZER.name
    embedder: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"chunk_size": self.chunk_size, "overlap": self.overlap, "tokenizer": self.tokenizer, "embedder": self.embedder},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class VectorIndex:
    """Exact cosine index.  Built once, then read-only."""

    def __init__(
        self,
        embedder: Embedder,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        overlap: int = DEFAULT_OVERLAP,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ) -> None:
        chunk_spans(0, chunk_size, overlap)  # validates the config
        self.embedder = embedder
        self.tokenizer = tokenizer
        self.config = IndexConfig(chunk_size, overlap, tokenizer.name, _describe(embedder))
        self.chunks: list[Chunk] = []
        self.doc_ids: list[str] = []
        self._matrix = np.zeros((0, embedder.dim))
        self._norms = np.zeros(0)
        self._build_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def document_count(self) -> int:
        return len(self.doc_ids)

    def add_documents(self, docs: Iterable[Document]) -> int:
        with self._build_lock:
            new_chunks: list[Chunk] = []
            for doc in docs:
                if doc.doc_id in self.doc_ids:
                    raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
                self.doc_ids.append(doc.doc_id)
                new_chunks.extend(chunk_document(doc, self.config.chunk_size, self.config.overlap, self.tokenizer))
            self._add_chunks(new_chunks, np.asarray(embed([c.text for c in new_chunks], self.embedder)))
            return len(new_chunks)

    def _add_chunks(self, chunks: list[Chunk], vectors: np.ndarray) -> None:
        if not chunks:
            return
        vectors = vectors.reshape(len(chunks), -1).astype(np.float64)
        if vectors.shape[1] != self._matrix.shape[1]:
            raise ValueError(f"vector dimension {vectors.shape[1]} != index dimension {self._matrix.shape[1]}")
        self.chunks.extend(chunks)
        self._matrix = np.vstack([self._matrix, vectors])
        self._norms = np.linalg.norm(self._matrix, axis=1)

    def embedded(self, i: int) -> EmbeddedChunk:
        return EmbeddedChunk(self.chunks[i], self._matrix[i].copy(), float(self._norms[i]))

    def similarities(self, query_vector: np.ndarray) -> np.ndarray:
        q = np.asarray(query_vector, dtype=np.float64)
        qn = np.linalg.norm(q)
        denom = self._norms * qn
        # row-wise reduction rather than BLAS gemv: identical rows must give
        # bit-identical scores so ties fall through to chunk_id
        dots = (self._matrix * q).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(sims, -1.0, 1.0)

    def search(self, query_vector: np.ndarray, k: int) -> list[tuple[Chunk, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.chunks:
            raise EmptyCorpusError("index holds no chunks")
        sims = self.similarities(query_vector)
        ids = np.array([c.chunk_id for c in self.chunks])
        # primary key: similarity descending; ties: chunk_id ascending
        order = np.lexsort((ids, -sims))[:k]
        return [(self.chunks[i], float(sims[i])) for i in order]

    def retrieve(self, query: str, k: int = DEFAULT_TOP_K, query_id: str = "") -> ContextBundle:
        if not self.chunks:
            raise EmptyCorpusError("index holds no chunks")
        qv = embed([query], self.embedder)[0]
        hits = self.search(qv, k)
        return ContextBundle(query_id, hits, sum(c.token_count for c, _ in hits))

    # persistence

    def save(self, path: str | Path) -> None:
        data = {
            "format": "vera-index-v1",
            "config": {
                "chunk_size": self.config.chunk_size,
                "overlap": self.config.overlap,
                "tokenizer": self.config.tokenizer,
                "embedder": self.config.embedder,
            },
            "config_fingerprint": self.config.fingerprint(),
            "doc_ids": self.doc_ids,
            "chunks": [c.to_dict() for c in self.chunks],
            "vectors": self._matrix.tolist(),
        }
        Path(path).write_text(json.dumps(data), encoding="utf-8")

    @classmethod
    def load(
        cls,
        path: str | Path,
        embedder: Embedder,
        chunk_size: int | None = None,
        overlap: int | None = None,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ) -> "VectorIndex":
        """Load a persisted index, refusing it if its config differs from the requested one."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = data["config"]
        index = cls(
            embedder,
            cfg["chunk_size"] if chunk_size is None else chunk_size,
            cfg["overlap"] if overlap is None else overlap,
            tokenizer,
        )
        stored = IndexConfig(cfg["chunk_size"], cfg["overlap"], cfg["tokenizer"], cfg["embedder"])
        if stored.fingerprint() != index.config.fingerprint():
            raise IndexConfigMismatchError(
                f"{path}: index was built with {_config_summary(stored)}, requested {_config_summary(index.config)}"
            )
        index.doc_ids = list(data["doc_ids"])
        chunks = [Chunk.from_dict(c) for c in data["chunks"]]
        if chunks:
            index._add_chunks(chunks, np.asarray(data["vectors"], dtype=np.float64))
        return index


def _describe(embedder: Embedder) -> dict:
    describe = getattr(embedder, "describe", None)
    return describe() if describe else {"kind": embedder.name, "dim": embedder.dim}


def _config_summary(cfg: IndexConfig) -> str:
    return f"chunk_size={cfg.chunk_size} overlap={cfg.overlap} tokenizer={cfg.tokenizer} embedder={cfg.embedder}"


# --- corpus files --------------------------------------------------------


def load_corpus(path: str | Path) -> list[Document]:
    """Read ``.jsonl`` records of {doc_id, title, body} or a plain-text file (one document)."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix in (".jsonl", ".json"):
        docs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                docs.append(Document(str(rec["doc_id"]), rec.get("title", ""), rec["body"], rec.get("source_uri")))
            except KeyError as exc:
                raise ValueError(f"{p}:{lineno}: missing field {exc}") from exc
    else:
        docs = [Document(p.stem, p.stem, text, str(p))] if text.strip() else []
    if not docs:
        raise EmptyCorpusError(f"{p}: no documents")
    return docs

"""Role-specific corpora: chunking, embedding, and exact cosine top-n retrieval."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import BackendError, Embedder, l2_normalize

log = logging.getLogger(__name__)

MIN_CHUNK_CHARS = 200
# scores equal to this many decimals count as ties (broken by chunk_id)
SCORE_DECIMALS = 12

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class IngestionError(RuntimeError):
    pass


class UnknownCorpusError(KeyError):
    pass


@dataclass(frozen=True)
class Corpus:
    corpus_id: str
    documents: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "documents", tuple((str(d), t) for d, t in self.documents))
        if not self.documents:
            raise ValueError(f"corpus {self.corpus_id!r} has no documents")
        ids = [d for d, _ in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"corpus {self.corpus_id!r} has duplicate doc_ids")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    corpus_id: str
    doc_id: str
    text: str
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)


def load_corpus_dir(path: str | Path) -> Corpus:
    """One document per ``*.txt`` file; the directory name is the corpus id."""
    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix == ".txt")
    docs = tuple((p.stem, p.read_text(encoding="utf-8")) for p in files)
    return Corpus(root.name, docs)


def _sentences(text: str) -> list[str]:
    # split points keep trailing whitespace on the preceding sentence
    pieces: list[str] = []
    start = 0
    for m in _SENTENCE_END.finditer(text):
        pieces.append(text[start : m.end()])
        start = m.end()
    if start < len(text):
        pieces.append(text[start:])
    return pieces


def _split_document(text: str, max_chars: int) -> list[str]:
    out: list[str] = []
    current = ""
    for sentence in _sentences(text):
        if len(current) + len(sentence) <= max_chars:
            current += sentence
            continue
        if current:
            out.append(current)
            current = ""
        while len(sentence) > max_chars:
            out.append(sentence[:max_chars])
            sentence = sentence[max_chars:]
        current = sentence
    if current:
        out.append(current)
    return out


def chunk_corpus(
    corpus: Corpus, max_chunk_chars: int = 500, warnings: list[str] | None = None
) -> list[Chunk]:
    """Split each document into sentence-aligned chunks of at most ``max_chunk_chars``.

    Joining a document's chunks gives back the document exactly. Sentences
    longer than the limit are hard-split. Empty documents are skipped and
    reported through ``warnings``.
    """
    if max_chunk_chars < MIN_CHUNK_CHARS:
        raise ValueError(f"max_chunk_chars must be >= {MIN_CHUNK_CHARS}")
    chunks: list[Chunk] = []
    for doc_id, text in corpus.documents:
        if not text.strip():
            msg = f"{corpus.corpus_id}/{doc_id}: empty document skipped"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        for i, piece in enumerate(_split_document(text, max_chunk_chars)):
            chunks.append(Chunk(f"{corpus.corpus_id}/{doc_id}#{i:04d}", corpus.corpus_id, doc_id, piece))
    return chunks


class EmbeddingCache:
    """Content-addressed ``.npy`` files keyed by backend id and text hash."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _path(self, backend_id: str, text: str) -> Path:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", backend_id)
        return self.root / safe / digest[:2] / f"{digest}.npy"

    def get(self, backend_id: str, text: str) -> np.ndarray | None:
        path = self._path(backend_id, text)
        return np.load(path) if path.exists() else None

    def put(self, backend_id: str, text: str, vector: np.ndarray) -> None:
        path = self._path(backend_id, text)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, np.asarray(vector, dtype=np.float64))
        tmp.replace(path)


def embed_chunks(
    chunks: Sequence[Chunk],
    embedder: Embedder,
    cache: EmbeddingCache | None = None,
    batch_size: int = 32,
) -> list[Chunk]:
    if not chunks:
        return []
    backend_id = embedder.binding.backend_id
    vectors: list[np.ndarray | None] = [None] * len(chunks)
    if cache is not None:
        for i, c in enumerate(chunks):
            vectors[i] = cache.get(backend_id, c.text)
    todo = [i for i, v in enumerate(vectors) if v is None]
    for start in range(0, len(todo), batch_size):
        batch = todo[start : start + batch_size]
        try:
            out = embedder.embed([chunks[i].text for i in batch])
        except BackendError:
            # locate the failing chunk for the diagnostic
            for i in batch:
                try:
                    embedder.embed([chunks[i].text])
                except BackendError as exc:
                    raise IngestionError(f"embedding failed for chunk {chunks[i].chunk_id}: {exc}") from exc
            raise
        out = l2_normalize(out)
        for i, v in zip(batch, out):
            vectors[i] = v
            if cache is not None:
                cache.put(backend_id, chunks[i].text, v)
    return [replace(c, embedding=np.asarray(v, dtype=np.float64)) for c, v in zip(chunks, vectors)]


def top_n(matrix: np.ndarray, ids: Sequence[str], query: np.ndarray, n: int) -> list[tuple[str, float]]:
    """Best ``n`` rows of ``matrix`` by dot product with ``query``; ties by id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(ids) == 0:
        return []
    scores = matrix @ query
    keys = np.round(scores, SCORE_DECIMALS)
    order = sorted(range(len(ids)), key=lambda i: (-keys[i], ids[i]))[:n]
    return [(ids[i], float(scores[i])) for i in order]


class KnowledgeIndex:
    """Immutable embedded chunk set of one corpus."""

    def __init__(self, corpus_id: str, chunks: Sequence[Chunk], embedder_id: str) -> None:
        if any(c.embedding is None for c in chunks):
            raise ValueError("all chunks must be embedded before indexing")
        self.corpus_id = corpus_id
        self.embedder_id = embedder_id
        self.chunks = tuple(chunks)
        self.ids = [c.chunk_id for c in self.chunks]
        self.texts = {c.chunk_id: c.text for c in self.chunks}
        self.matrix = (
            np.vstack([c.embedding for c in self.chunks]) if self.chunks else np.zeros((0, 0))
        )
        self.matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.chunks)

    def search(self, query_vector: np.ndarray, n: int) -> list[tuple[str, float]]:
        return top_n(self.matrix, self.ids, np.asarray(query_vector, dtype=np.float64), n)


class KnowledgeBase:
    """All ingested corpora for a scenario, sharing one embedder."""

    def __init__(self, embedder: Embedder) -> None:
        self.embedder = embedder
        self.indexes: dict[str, KnowledgeIndex] = {}
        self.warnings: list[str] = []

    def ingest(
        self,
        corpus: Corpus,
        max_chunk_chars: int = 500,
        cache: EmbeddingCache | None = None,
    ) -> KnowledgeIndex:
        chunks = chunk_corpus(corpus, max_chunk_chars, self.warnings)
        embedded = embed_chunks(chunks, self.embedder, cache)
        index = KnowledgeIndex(corpus.corpus_id, embedded, self.embedder.binding.backend_id)
        self.indexes[corpus.corpus_id] = index
        return index

    def ingest_all(self, corpora: Iterable[Corpus], **kwargs) -> None:
        for corpus in corpora:
            self.ingest(corpus, **kwargs)

    def index(self, corpus_id: str) -> KnowledgeIndex:
        try:
            return self.indexes[corpus_id]
        except KeyError:
            raise UnknownCorpusError(corpus_id) from None

    def retrieve(self, corpus_id: str, query_text: str, n: int) -> list[tuple[str, float]]:
        return retrieve(self.index(corpus_id), query_text, n, self.embedder)


def fit_query(text: str, limit: int) -> tuple[str, bool]:
    """Keep the most recent ``limit`` characters of an over-long query."""
    if len(text) <= limit:
        return text, False
    return text[-limit:], True


def retrieve(
    index: KnowledgeIndex, query_text: str, n: int, embedder: Embedder
) -> list[tuple[str, float]]:
    """Top-``n`` chunks by cosine similarity to ``query_text``, best first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    query = l2_normalize(embedder.embed([query_text]))[0]
    return index.search(query, n)

"""Corpus ingestion and Okapi BM25 retrieval over token-id documents.

The retriever operates on the engine's own token ids (byte-level by
default), so a term is simply a token id and no second tokenizer exists
between retrieval and generation.  Scoring is Okapi BM25 with the
non-negative idf variant ``ln(1 + (N - df + 0.5) / (df + 0.5))`` and
defaults ``k1=0.9, b=0.4``; query tokens contribute once per occurrence.
Ranking is by descending score with ties broken by ascending doc id.

The generation loop only sees the small ``Retriever`` callable protocol
(query tokens in, ranked token documents out), so alternative retrievers
plug in without touching the decoding code.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

INDEX_MAGIC = b"RKBM"
INDEX_VERSION = 1


@dataclass(frozen=True)
class RetrievalConfig:
    stride: int = 16
    query_len: int = 16
    top_k: int = 1
    evidence_budget: int = 128  # retrieved doc truncated to this many tokens

    def __post_init__(self):
        if self.stride < 1 or self.query_len < 1 or self.top_k < 1:
            raise ValueError("stride, query_len, top_k must all be >= 1")
        if self.evidence_budget < 0:
            raise ValueError("evidence_budget must be >= 0")


@dataclass
class Corpus:
    """Documents as (doc_id, token sequence); ids unique, no empty docs.

    ``meta`` optionally records per-document source information (for
    example the file a document was ingested from).
    """

    docs: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for doc_id, tokens in self.docs:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r}")
            if len(tokens) == 0:
                raise ValueError(f"empty document {doc_id!r}")
            seen.add(doc_id)

    def __len__(self) -> int:
        return len(self.docs)

    def tokens_by_id(self) -> dict[str, tuple[int, ...]]:
        return dict(self.docs)


def ingest_text_dir(
    path,
    tokenize: Callable[[str], Sequence[int]],
    exclude_ids: frozenset[str] = frozenset(),
) -> Corpus:
    """One document per file; the filename is the doc id."""
    docs = []
    meta = {}
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full) or name in exclude_ids:
            continue
        with open(full, "r", encoding="utf-8") as f:
            tokens = tuple(tokenize(f.read()))
        if tokens:
            docs.append((name, tokens))
            meta[name] = full
    return Corpus(docs, meta)


def ingest_jsonl(
    path,
    tokenize: Callable[[str], Sequence[int]],
    exclude_ids: frozenset[str] = frozenset(),
) -> Corpus:
    """JSON-lines with fields ``id`` and ``text``."""
    docs = []
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                doc_id, text = str(rec["id"]), rec["text"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad record ({e})") from e
            if doc_id in exclude_ids:
                continue
            tokens = tuple(tokenize(text))
            if tokens:
                docs.append((doc_id, tokens))
                meta[doc_id] = f"{path}:{lineno}"
    return Corpus(docs, meta)


class Bm25Index:
    def __init__(self, corpus: Corpus, k1: float = 0.9, b: float = 0.4):
        if len(corpus) == 0:
            raise ValueError("cannot index an empty corpus")
        self.k1 = k1
        self.b = b
        self.doc_ids = [doc_id for doc_id, _ in corpus.docs]
        self.doc_tokens = [tokens for _, tokens in corpus.docs]
        self.doc_len = [len(tokens) for tokens in self.doc_tokens]
        self.avgdl = sum(self.doc_len) / len(self.doc_len)
        self.tf: list[dict[int, int]] = []
        self.df: dict[int, int] = {}
        for tokens in self.doc_tokens:
            counts: dict[int, int] = {}
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
            self.tf.append(counts)
            for t in counts:
                self.df[t] = self.df.get(t, 0) + 1

    def __len__(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: int) -> float:
        n = len(self.doc_ids)
        df = self.df.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score(self, doc_index: int, query: Sequence[int]) -> float:
        """Okapi BM25 of one document; 0 when no query term occurs in it."""
        counts = self.tf[doc_index]
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc_index] / self.avgdl)
        s = 0.0
        for term in query:
            f = counts.get(term, 0)
            if f == 0:
                continue
            s += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return s


def build_index(corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> Bm25Index:
    return Bm25Index(corpus, k1=k1, b=b)


def retrieve(index: Bm25Index, query: Sequence[int], top_k: int) -> list[tuple[str, float]]:
    """Top-k (doc_id, score), descending score, ties by ascending doc_id.

    An empty query yields all-zero scores in doc-id order.  Deterministic:
    the same index and query always produce the identical ranking.
    """
    scored = [
        (index.score(i, query), index.doc_ids[i]) for i in range(len(index))
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    k = min(top_k, len(index))
    return [(doc_id, score) for score, doc_id in scored[:k]]


def should_retrieve(n: int, prompt_len: int, stride: int) -> bool:
    """True when the decoding loop at length ``n`` must call the retriever.

    Fires at ``n == prompt_len`` (evidence starts out empty, so the first
    step retrieves) and every ``stride`` tokens after that.
    """
    if n < prompt_len:
        raise ValueError(f"n={n} < prompt_len={prompt_len}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (n - prompt_len) % stride == 0


@dataclass(frozen=True)
class RetrievedDoc:
    doc_id: str
    tokens: tuple[int, ...]


class Retriever(Protocol):
    """Plug-and-play boundary between retrieval and generation."""

    def retrieve_docs(self, query: Sequence[int], k: int) -> list[RetrievedDoc]:
        ...


class Bm25Retriever:
    """Bm25Index-backed retriever; truncates documents to the evidence budget."""

    def __init__(self, index: Bm25Index, evidence_budget: int = 128):
        self.index = index
        self.evidence_budget = evidence_budget

    def retrieve_docs(self, query: Sequence[int], k: int) -> list[RetrievedDoc]:
        ranked = retrieve(self.index, query, k)
        by_id = {doc_id: tokens for doc_id, tokens in zip(self.index.doc_ids, self.index.doc_tokens)}
        return [
            RetrievedDoc(doc_id, tuple(by_id[doc_id][: self.evidence_budget]))
            for doc_id, _ in ranked
        ]


class FixedEvidenceRetriever:
    """Returns the same precomputed documents on every call.

    Used by the benchmark harness (simulated retrieved content, retrieval
    cost excluded from timing) and by tests that need empty evidence.
    """

    def __init__(self, docs: Sequence[Sequence[int]] = ()):
        self.docs = [RetrievedDoc(f"fixed{i}", tuple(d)) for i, d in enumerate(docs)]

    def retrieve_docs(self, query: Sequence[int], k: int) -> list[RetrievedDoc]:
        return self.docs[: min(k, len(self.docs))] if self.docs else []


def save_index(index: Bm25Index, path) -> None:
    """Versioned binary persistence (little-endian, length-prefixed ids)."""
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<Idd", INDEX_VERSION, index.k1, index.b))
        f.write(struct.pack("<I", len(index.doc_ids)))
        for doc_id, tokens in zip(index.doc_ids, index.doc_tokens):
            raw = doc_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", len(tokens)))
            f.write(struct.pack(f"<{len(tokens)}I", *tokens))


def load_index(path) -> Bm25Index:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: not a ralmkit BM25 index")
        version, k1, b = struct.unpack("<Idd", f.read(20))
        if version != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        (ndocs,) = struct.unpack("<I", f.read(4))
        docs = []
        for _ in range(ndocs):
            (idlen,) = struct.unpack("<I", f.read(4))
            doc_id = f.read(idlen).decode("utf-8")
            (ntok,) = struct.unpack("<I", f.read(4))
            tokens = struct.unpack(f"<{ntok}I", f.read(4 * ntok))
            docs.append((doc_id, tokens))
    return build_index(Corpus(docs), k1=k1, b=b)

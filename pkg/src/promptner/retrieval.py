"""Similarity search over training sentences under four interchangeable engines.

Engines: sparse TF-IDF cosine, single-vector dense cosine, late-interaction
MaxSim over per-token vectors, and dual-role dot product. Corpora stay small
enough for exact scans, so there is no ANN machinery here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import LabeledSentence
from .errors import EmbeddingProviderError, IndexBuildError, ScoringError

FALLBACK_DIM = 256


class EngineKind(str, Enum):
    TFIDF = "tfidf"
    DENSE = "dense"
    LATE_INTERACTION = "late_interaction"
    DUAL_ENCODER = "dual_encoder"


@dataclass(frozen=True)
class SparseVector:
    """L2-normalized term-id -> weight map (empty vectors stay empty)."""

    entries: dict[int, float]

    @staticmethod
    def normalized(raw: dict[int, float]) -> "SparseVector":
        norm = math.sqrt(sum(w * w for w in raw.values()))
        if norm == 0.0:
            return SparseVector({})
        return SparseVector({t: w / norm for t, w in raw.items()})

    def dot(self, other: "SparseVector") -> float:
        a, b = self.entries, other.entries
        if len(b) < len(a):
            a, b = b, a
        return sum(w * b[t] for t, w in a.items() if t in b)


@dataclass(frozen=True)
class DenseVector:
    values: np.ndarray
    dim: int

    def __post_init__(self):
        if self.values.shape != (self.dim,):
            raise ScoringError(f"expected shape ({self.dim},), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ScoringError("non-finite embedding values")


@dataclass(frozen=True)
class TokenMatrix:
    rows: np.ndarray  # (n_tokens, dim), unit-normalized rows

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ScoringError(f"token matrix needs >=1 row, got shape {self.rows.shape}")

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])


@dataclass(frozen=True)
class RetrievedExample:
    sentence_id: str
    score: float
    rank: int


class EmbeddingProvider(Protocol):
    """Mirror of the embedding-service wire contract, callable in-process."""

    def embed(self, texts: Sequence[Sequence[str]], granularity: str = "sentence",
              role: str = "symmetric") -> list[np.ndarray]:
        ...

    @property
    def dim(self) -> int:
        ...


def _hash_gram(gram: str) -> tuple[int, float]:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "big")
    index = value % FALLBACK_DIM
    sign = 1.0 if (value >> 16) & 1 else -1.0
    return index, sign


def _token_vector(text: str) -> np.ndarray:
    padded = f"^{text}$"
    vec = np.zeros(FALLBACK_DIM)
    for i in range(len(padded) - 2):
        index, sign = _hash_gram(padded[i:i + 3])
        vec[index] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class FallbackEmbedder:
    """Deterministic character-3-gram feature hashing; no model weights needed.

    Sentence vectors are the normalized mean of token vectors, so morphological
    near-duplicates land close together even without a neural encoder.
    """

    dim = FALLBACK_DIM

    def embed(self, texts: Sequence[Sequence[str]], granularity: str = "sentence",
              role: str = "symmetric") -> list[np.ndarray]:
        out = []
        for tokens in texts:
            if not tokens:
                raise EmbeddingProviderError("cannot embed an empty token list")
            rows = np.stack([_token_vector(t) for t in tokens])
            if granularity == "token":
                out.append(rows)
            else:
                mean = rows.mean(axis=0)
                norm = np.linalg.norm(mean)
                out.append(mean / norm if norm > 0 else mean)
        return out


def fallback_embed(tokens: Sequence[str], granularity: str = "sentence") -> DenseVector | TokenMatrix:
    """Offline stand-in for the neural encoders; bit-reproducible."""
    arr = FallbackEmbedder().embed([list(tokens)], granularity=granularity)[0]
    if granularity == "token":
        return TokenMatrix(rows=arr)
    return DenseVector(values=arr, dim=FALLBACK_DIM)


class HttpEmbedder:
    """Client for the embedding microservice; same contract as FallbackEmbedder."""

    def __init__(self, endpoint: str, model: str = "hash-256", timeout: float = 30.0,
                 session=None):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout
        self._session = session or requests.Session()
        try:
            resp = self._session.get(f"{self.endpoint}/info", timeout=timeout)
            info = resp.json()
            self.dim = int(info["dims"][model])
        except (OSError, ValueError, KeyError) as exc:
            raise EmbeddingProviderError(
                f"embedding service at {self.endpoint!r} unusable: {exc}") from exc

    def embed(self, texts: Sequence[Sequence[str]], granularity: str = "sentence",
              role: str = "symmetric") -> list[np.ndarray]:
        try:
            resp = self._session.post(
                f"{self.endpoint}/embed",
                json={"texts": [list(t) for t in texts], "granularity": granularity,
                      "role": role, "model": self.model},
                timeout=self.timeout,
            )
        except OSError as exc:
            raise EmbeddingProviderError(f"embed request failed: {exc}") from exc
        if resp.status_code != 200:
            raise EmbeddingProviderError(f"embed endpoint returned {resp.status_code}")
        return [np.asarray(v, dtype=float) for v in resp.json()["vectors"]]


def tfidf_weight(term_count: int, doc_freq: int, n_docs: int) -> float:
    """Smoothed-idf weight: term_count * (ln((1+N)/(1+df)) + 1)."""
    if term_count < 1:
        raise ValueError(f"term_count must be >= 1, got {term_count}")
    if not 1 <= doc_freq <= n_docs:
        raise ValueError(f"need 1 <= doc_freq <= n_docs, got df={doc_freq}, N={n_docs}")
    return term_count * (math.log((1 + n_docs) / (1 + doc_freq)) + 1.0)


@dataclass(frozen=True)
class Index:
    """Immutable per-sentence representations plus whatever the engine needs
    to embed queries the same way documents were embedded."""

    kind: EngineKind
    ids: tuple[str, ...]
    vocabulary: dict[str, int] | None = None         # tfidf
    doc_freq: dict[int, int] | None = None           # tfidf
    n_docs: int = 0                                  # tfidf (fixed at build)
    sparse: dict[str, SparseVector] | None = None
    dense: dict[str, DenseVector] | None = None
    matrices: dict[str, TokenMatrix] | None = None
    dim: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def without(self, sentence_id: str) -> "Index":
        """Drop one stored document without refitting weights."""
        ids = tuple(i for i in self.ids if i != sentence_id)
        trim = lambda m: {k: v for k, v in m.items() if k != sentence_id} if m else m
        return Index(kind=self.kind, ids=ids, vocabulary=self.vocabulary,
                     doc_freq=self.doc_freq, n_docs=self.n_docs,
                     sparse=trim(self.sparse), dense=trim(self.dense),
                     matrices=trim(self.matrices), dim=self.dim)


def _tfidf_vector(texts: Sequence[str], vocabulary: dict[str, int],
                  doc_freq: dict[int, int], n_docs: int) -> SparseVector:
    counts: dict[int, int] = {}
    for text in texts:
        term_id = vocabulary.get(text.lower())
        if term_id is not None:
            counts[term_id] = counts.get(term_id, 0) + 1
    raw = {t: tfidf_weight(c, doc_freq[t], n_docs) for t, c in sorted(counts.items())}
    return SparseVector.normalized(raw)


def build_index(train: Sequence[LabeledSentence], kind: EngineKind,
                embedder: EmbeddingProvider | None = None) -> Index:
    """Index training sentences for retrieval; error messages carry sentence ids."""
    kind = EngineKind(kind)
    if not train:
        raise IndexBuildError("cannot index an empty training split")
    ids = tuple(s.id for s in train)
    if len(set(ids)) != len(ids):
        raise IndexBuildError("duplicate sentence ids in training split")

    if kind is EngineKind.TFIDF:
        # canonical (sorted) vocabulary so scores do not depend on insertion order
        terms = sorted({t.text.lower() for s in train for t in s.tokens})
        vocabulary = {term: i for i, term in enumerate(terms)}
        doc_freq: dict[int, int] = {i: 0 for i in vocabulary.values()}
        for s in train:
            for term_id in {vocabulary[t.text.lower()] for t in s.tokens}:
                doc_freq[term_id] += 1
        n_docs = len(train)
        sparse = {s.id: _tfidf_vector(s.texts, vocabulary, doc_freq, n_docs) for s in train}
        return Index(kind=kind, ids=ids, vocabulary=vocabulary, doc_freq=doc_freq,
                     n_docs=n_docs, sparse=sparse)

    if embedder is None:
        raise IndexBuildError(f"engine {kind.value} requires an embedding provider")
    granularity = "token" if kind is EngineKind.LATE_INTERACTION else "sentence"
    role = "document" if kind is EngineKind.DUAL_ENCODER else "symmetric"
    dense: dict[str, DenseVector] = {}
    matrices: dict[str, TokenMatrix] = {}
    for s in train:
        try:
            arr = embedder.embed([list(s.texts)], granularity=granularity, role=role)[0]
        except EmbeddingProviderError:
            raise
        except Exception as exc:
            raise EmbeddingProviderError(str(exc), sentence_id=s.id) from exc
        if granularity == "token":
            matrices[s.id] = TokenMatrix(rows=arr)
        else:
            dense[s.id] = DenseVector(values=arr, dim=arr.shape[0])
    dim = embedder.dim
    return Index(kind=kind, ids=ids, dense=dense or None, matrices=matrices or None, dim=dim)


def maxsim(query_rows: np.ndarray, doc_rows: np.ndarray) -> float:
    """Sum over query tokens of the max dot product against any doc token."""
    return float((query_rows @ doc_rows.T).max(axis=1).sum())


def score(query, doc, kind: EngineKind) -> float:
    """Score one query representation against one stored representation."""
    kind = EngineKind(kind)
    if kind is EngineKind.TFIDF:
        return query.dot(doc)
    if kind is EngineKind.LATE_INTERACTION:
        if query.dim != doc.dim:
            raise ScoringError(f"dim mismatch: {query.dim} vs {doc.dim}")
        return maxsim(query.rows, doc.rows)
    if query.dim != doc.dim:
        raise ScoringError(f"dim mismatch: {query.dim} vs {doc.dim}")
    if kind is EngineKind.DUAL_ENCODER:
        return float(np.dot(query.values, doc.values))
    # dense single-vector: cosine
    qn = np.linalg.norm(query.values)
    dn = np.linalg.norm(doc.values)
    if qn == 0.0 or dn == 0.0:
        return 0.0
    return float(np.dot(query.values, doc.values) / (qn * dn))


def embed_query(index: Index, query_texts: Sequence[str],
                embedder: EmbeddingProvider | None = None):
    """Represent a query exactly the way indexed documents were represented."""
    if index.kind is EngineKind.TFIDF:
        return _tfidf_vector(query_texts, index.vocabulary, index.doc_freq, index.n_docs)
    if embedder is None:
        raise ScoringError(f"engine {index.kind.value} requires an embedding provider")
    granularity = "token" if index.kind is EngineKind.LATE_INTERACTION else "sentence"
    role = "query" if index.kind is EngineKind.DUAL_ENCODER else "symmetric"
    arr = embedder.embed([list(query_texts)], granularity=granularity, role=role)[0]
    if granularity == "token":
        return TokenMatrix(rows=arr)
    return DenseVector(values=arr, dim=arr.shape[0])


def retrieve(index: Index, query_texts: Sequence[str], n: int,
             embedder: EmbeddingProvider | None = None) -> list[RetrievedExample]:
    """Top-n most similar training sentences, ties broken by id ascending."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not index.ids:
        raise IndexBuildError("index is empty")
    query = embed_query(index, query_texts, embedder=embedder)
    store = index.sparse or index.dense or index.matrices
    scored = [(-score(query, store[sid], index.kind), sid) for sid in index.ids]
    scored.sort()
    return [RetrievedExample(sentence_id=sid, score=-neg, rank=i + 1)
            for i, (neg, sid) in enumerate(scored[:n])]


INDEX_FORMAT_VERSION = 1


def save_index(index: Index, path: str | Path) -> None:
    """Persist as a JSON snapshot; floats round-trip exactly through repr."""
    payload: dict = {
        "format_version": INDEX_FORMAT_VERSION,
        "kind": index.kind.value,
        "ids": list(index.ids),
        "dim": index.dim,
        "n_docs": index.n_docs,
    }
    if index.kind is EngineKind.TFIDF:
        payload["vocabulary"] = index.vocabulary
        payload["doc_freq"] = {str(k): v for k, v in index.doc_freq.items()}
        payload["sparse"] = {
            sid: {str(t): w for t, w in vec.entries.items()}
            for sid, vec in index.sparse.items()
        }
    elif index.kind is EngineKind.LATE_INTERACTION:
        payload["matrices"] = {sid: m.rows.tolist() for sid, m in index.matrices.items()}
    else:
        payload["dense"] = {sid: v.values.tolist() for sid, v in index.dense.items()}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_index(path: str | Path) -> Index:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != INDEX_FORMAT_VERSION:
        raise IndexBuildError(f"unsupported index format: {payload.get('format_version')}")
    kind = EngineKind(payload["kind"])
    ids = tuple(payload["ids"])
    if kind is EngineKind.TFIDF:
        sparse = {
            sid: SparseVector({int(t): w for t, w in entries.items()})
            for sid, entries in payload["sparse"].items()
        }
        return Index(kind=kind, ids=ids, vocabulary=payload["vocabulary"],
                     doc_freq={int(k): v for k, v in payload["doc_freq"].items()},
                     n_docs=payload["n_docs"], sparse=sparse)
    if kind is EngineKind.LATE_INTERACTION:
        matrices = {sid: TokenMatrix(rows=np.asarray(rows, dtype=float))
                    for sid, rows in payload["matrices"].items()}
        return Index(kind=kind, ids=ids, matrices=matrices, dim=payload["dim"])
    dense = {sid: DenseVector(values=np.asarray(v, dtype=float), dim=payload["dim"])
             for sid, v in payload["dense"].items()}
    return Index(kind=kind, ids=ids, dense=dense, dim=payload["dim"])

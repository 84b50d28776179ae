"""Embedding-similarity scoring: mean cosine and thresholded accuracy per cell."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Optional, Protocol, Sequence, Union

import numpy as np

from .corpus import GoldAnnotation
from .postprocess import SubtypedConcept
from .schema import Cell, cell_sort_key

log = logging.getLogger(__name__)

DEFAULT_EMBED_MODEL = "all-MiniLM-L6-v2"
DEFAULT_THRESHOLDS = (0.8, 0.9)

EmbeddingVector = np.ndarray
AlignMode = Literal["span", "concat"]


class EmbeddingProvider(Protocol):
    model_id: str

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return vec / norm


class StubEmbedder:
    """Deterministic bag-of-words hash projection, for tests and offline runs.

    Each case-folded word maps to a fixed Gaussian direction derived from
    ``blake2b(seed, word)``; a text embeds to the normalized sum of its word
    directions. Texts sharing words land close together, identical texts
    coincide.
    """

    def __init__(self, seed: int = 0, dim: int = 384):
        self.seed = int(seed)
        self.dim = int(dim)
        self.model_id = f"stub-hash-{self.seed}-{self.dim}"

    def _direction(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, key=self.seed.to_bytes(8, "little", signed=True)
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        from .eval_ner import tokenize_words

        out = []
        for text in texts:
            tokens = sorted(tokenize_words(text)) or [text]
            out.append(_normalize(sum(self._direction(t) for t in tokens)))
        return out


class HTTPEmbedder:
    """Remote embeddings endpoint: ``{"model", "input": [texts]}`` in,
    ``{"data": [{"embedding": [...]}, ...]}`` out, order preserved."""

    def __init__(
        self,
        endpoint_url: str,
        model_id: str = DEFAULT_EMBED_MODEL,
        api_key_env_name: str = "LLM_API_KEY",
        timeout: float = 60.0,
        client=None,
    ):
        import httpx

        self.endpoint_url = endpoint_url
        self.model_id = model_id
        self.api_key_env_name = api_key_env_name
        self._client = client or httpx.Client(timeout=timeout)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        from .extraction import AuthenticationError, BackendError

        headers = {}
        key = os.environ.get(self.api_key_env_name, "").strip()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        resp = self._client.post(
            self.endpoint_url, json={"model": self.model_id, "input": list(texts)}, headers=headers
        )
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"embeddings endpoint rejected credentials (HTTP {resp.status_code})",
                                      resp.status_code)
        if resp.status_code >= 400:
            raise BackendError(f"embeddings endpoint returned HTTP {resp.status_code}", resp.status_code)
        data = resp.json()["data"]
        if len(data) != len(texts):
            raise BackendError(f"expected {len(texts)} embeddings, got {len(data)}")
        return [_normalize(item["embedding"]) for item in data]


class SentenceTransformerEmbedder:
    """Local sentence-transformers model (optional dependency)."""

    def __init__(self, model_id: str = DEFAULT_EMBED_MODEL, device: Optional[str] = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise RuntimeError(
                "sentence-transformers is not installed; use --stub-embedder or --embed-url"
            ) from exc
        self.model_id = model_id
        self._model = SentenceTransformer(model_id, device=device)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        vecs = self._model.encode(
            list(texts), convert_to_numpy=True, normalize_embeddings=True, show_progress_bar=False
        )
        return [_normalize(v) for v in vecs]


class EmbeddingCache:
    """Thread-safe ``(model_id, text) -> vector`` cache, optionally persisted as JSON."""

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._store: dict[str, list[float]] = {}
        if self.path and self.path.is_file():
            self._store = json.loads(self.path.read_text(encoding="utf-8"))

    @staticmethod
    def key(model_id: str, text: str) -> str:
        return hashlib.sha256(f"{model_id}\0{text}".encode("utf-8")).hexdigest()

    def get(self, model_id: str, text: str) -> Optional[EmbeddingVector]:
        with self._lock:
            hit = self._store.get(self.key(model_id, text))
        return None if hit is None else np.asarray(hit, dtype=np.float64)

    def put(self, model_id: str, text: str, vec: EmbeddingVector) -> None:
        with self._lock:
            self._store[self.key(model_id, text)] = [float(x) for x in vec]

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            payload = json.dumps(self._store, sort_keys=True)
        self.path.write_text(payload, encoding="utf-8")


class Embedder:
    """Provider plus cache; the entry point the scoring code uses."""

    def __init__(self, provider: EmbeddingProvider, cache: Optional[EmbeddingCache] = None, batch_size: int = 64):
        self.provider = provider
        self.cache = cache if cache is not None else EmbeddingCache()
        self.batch_size = batch_size

    @property
    def model_id(self) -> str:
        return self.provider.model_id

    def prefetch(self, texts: Iterable[str]) -> None:
        missing = sorted({t for t in texts if t and self.cache.get(self.model_id, t) is None})
        for i in range(0, len(missing), self.batch_size):
            chunk = missing[i : i + self.batch_size]
            for text, vec in zip(chunk, self.provider.embed_batch(chunk)):
                self.cache.put(self.model_id, text, vec)

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = self.cache.get(self.model_id, text)
        if vec is None:
            vec = self.provider.embed_batch([text])[0]
            self.cache.put(self.model_id, text, vec)
            vec = self.cache.get(self.model_id, text)
        return vec

    def similarity(self, a: str, b: str) -> float:
        return cosine(self.embed(a), self.embed(b))


def embed(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    if not text:
        raise ValueError("cannot embed empty text")
    return provider.embed_batch([text])[0]


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of two unit vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(min(1.0, max(-1.0, np.dot(a, b))))


@dataclass(frozen=True)
class SimilarityRecord:
    gold_text: str
    predicted_text: Optional[str]
    s: float


@dataclass(frozen=True)
class AlignResult:
    records: list[SimilarityRecord]
    spurious: list[str] = field(default_factory=list)


def align(
    gold_cell: Sequence[str],
    predicted_cell: Sequence[str],
    similarity: Callable[[str, str], float],
) -> AlignResult:
    """Greedy max-similarity pairing of gold spans with predictions.

    Ties go to the earliest gold, then earliest prediction. Each gold span
    yields exactly one record; leftover predictions are returned as
    ``spurious``.
    """
    scored = [
        (similarity(g, p), i, j)
        for i, g in enumerate(gold_cell)
        for j, p in enumerate(predicted_cell)
    ]
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_g: dict[int, tuple[int, float]] = {}
    used_p: set[int] = set()
    for s, i, j in scored:
        if i in used_g or j in used_p:
            continue
        used_g[i] = (j, s)
        used_p.add(j)
        if len(used_g) == len(gold_cell) or len(used_p) == len(predicted_cell):
            break

    records = []
    for i, g in enumerate(gold_cell):
        if i in used_g:
            j, s = used_g[i]
            records.append(SimilarityRecord(g, predicted_cell[j], s))
        else:
            records.append(SimilarityRecord(g, None, 0.0))
    spurious = [p for j, p in enumerate(predicted_cell) if j not in used_p]
    return AlignResult(records, spurious)


@dataclass(frozen=True)
class SemanticEvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    model_id: str = DEFAULT_EMBED_MODEL
    mode: AlignMode = "span"

    def __post_init__(self) -> None:
        th = tuple(float(t) for t in self.thresholds)
        if not th:
            raise ValueError("at least one threshold is required")
        if any(not 0.0 < t <= 1.0 for t in th):
            raise ValueError("thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if self.mode not in ("span", "concat"):
            raise ValueError(f"unknown alignment mode {self.mode!r}")
        object.__setattr__(self, "thresholds", th)


@dataclass(frozen=True)
class SemanticScores:
    avg_s: float
    acc_at: dict[float, float]
    n_records: int = 0
    spurious: int = 0


def score_records(records: Sequence[SimilarityRecord], thresholds: Sequence[float]) -> SemanticScores:
    """Mean similarity and the fraction of records strictly above each threshold."""
    n = len(records)
    if n == 0:
        return SemanticScores(0.0, {t: 0.0 for t in thresholds}, 0)
    sims = [r.s for r in records]
    return SemanticScores(
        avg_s=sum(sims) / n,
        acc_at={t: sum(1 for s in sims if s > t) / n for t in thresholds},
        n_records=n,
    )


def evaluate_semantic(
    gold: Iterable[GoldAnnotation],
    concepts: Iterable[SubtypedConcept],
    embedder: Union[Embedder, EmbeddingProvider],
    config: SemanticEvalConfig = SemanticEvalConfig(),
    cells: Optional[Iterable[Cell]] = None,
) -> dict[Cell, SemanticScores]:
    """Per cell, align gold spans to predictions note by note and score the records.

    In ``concat`` mode each note's gold spans (and predictions) for a cell are
    joined with ``"; "`` and compared as one pair.
    """
    if not isinstance(embedder, Embedder):
        embedder = Embedder(embedder)
    gold_by: dict[Cell, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    pred_by: dict[Cell, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    for g in gold:
        gold_by[g.cell][g.note_id].append(g.span_text)
    for c in concepts:
        for cell in c.cells:
            pred_by[cell][c.note_id].append(c.text)
    if config.mode == "concat":
        for table in (gold_by, pred_by):
            for notes in table.values():
                for note_id, texts in notes.items():
                    notes[note_id] = ["; ".join(texts)]

    scored = sorted(set(cells) if cells is not None else set(gold_by), key=cell_sort_key)
    embedder.prefetch(
        t
        for table in (gold_by, pred_by)
        for cell in scored
        for texts in table.get(cell, {}).values()
        for t in texts
    )

    results: dict[Cell, SemanticScores] = {}
    for cell in scored:
        records: list[SimilarityRecord] = []
        spurious = 0
        g_notes, p_notes = gold_by.get(cell, {}), pred_by.get(cell, {})
        for note_id in sorted(set(g_notes) | set(p_notes)):
            res = align(g_notes.get(note_id, []), p_notes.get(note_id, []), embedder.similarity)
            records.extend(res.records)
            spurious += len(res.spurious)
        scores = score_records(records, config.thresholds)
        results[cell] = SemanticScores(scores.avg_s, scores.acc_at, scores.n_records, spurious)
    return results

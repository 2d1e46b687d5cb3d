"""Instance featurization, exact cosine index and MMR demonstration selection."""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass
from datetime import date
from typing import Protocol, Sequence

import httpx
import numpy as np

from .errors import ConfigError, DegenerateInputError, RoutinecastError
from .ingest import Ontology, Weekday

HISTORY_WINDOW = 3
RECENCY_WEIGHTS = (1.0, 0.6, 0.36)  # newest first
DEFAULT_EMBED_MODEL = "all-MiniLM-L6-v2"


@dataclass(frozen=True)
class InstanceContext:
    day_of_week: Weekday
    local_time: float  # minutes since midnight
    recent_history: tuple[tuple[str, float], ...]  # oldest first
    target_label: str | None = None
    target_duration: float | None = None
    date: date | None = None
    instance_id: str = ""
    source: str = ""  # provenance tag: "train" or "eval"

    def __post_init__(self):
        if len(self.recent_history) > HISTORY_WINDOW:
            raise ConfigError(f"history holds at most {HISTORY_WINDOW} activities")
        if not 0 <= self.local_time < 24 * 60:
            raise ConfigError(f"local time out of range: {self.local_time}")
        if (self.target_label is None) != (self.target_duration is None):
            raise ConfigError("target label and duration come together")

    @property
    def clock(self) -> str:
        m = int(self.local_time)
        return f"{m // 60:02d}:{m % 60:02d}"

    @property
    def has_target(self) -> bool:
        return self.target_label is not None


def context_text(ctx: InstanceContext) -> str:
    """Canonical one-line rendering fed to text embedding models."""
    history = ", ".join(f"{label} {minutes:.1f} min" for label, minutes in ctx.recent_history) or "none"
    return f"day: {ctx.day_of_week.long}; time: {ctx.clock}; history: {history}"


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    backend_id: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class EmbeddingBackendError(RoutinecastError):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class Embedder(Protocol):
    backend_id: str

    def embed(self, contexts: Sequence[InstanceContext]) -> np.ndarray: ...


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if not np.all(np.isfinite(mat)) or np.any(norms == 0):
        raise EmbeddingBackendError("embedding contains non-finite or zero vectors", retryable=False)
    return mat / norms


class BuiltinEmbedder:
    """Deterministic hand-built features.

    Layout: day one-hot (7) | sin, cos of the clock angle (2) | recency-weighted
    label histogram (|ontology|) | log1p of the last duration (1), L2-normalized.
    """

    def __init__(self, ontology: Ontology):
        self.ontology = ontology
        self.backend_id = f"builtin/v1/{len(ontology)}"

    @property
    def dim(self) -> int:
        return 7 + 2 + len(self.ontology) + 1

    def raw_features(self, ctx: InstanceContext) -> np.ndarray:
        vec = np.zeros(self.dim)
        vec[int(ctx.day_of_week)] = 1.0
        angle = 2 * math.pi * ctx.local_time / 1440
        vec[7], vec[8] = math.sin(angle), math.cos(angle)
        for weight, (label, _) in zip(RECENCY_WEIGHTS, reversed(ctx.recent_history)):
            vec[9 + self.ontology.index(label)] += weight
        if ctx.recent_history:
            vec[-1] = math.log1p(ctx.recent_history[-1][1])
        return vec

    def embed(self, contexts: Sequence[InstanceContext]) -> np.ndarray:
        mat = np.array([self.raw_features(c) for c in contexts]).reshape(len(contexts), self.dim)
        return _unit_rows(mat)


class HttpEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint.

    Sends ``{"model", "input": [texts]}`` and reads ``data[i].embedding``.
    """

    def __init__(
        self,
        model: str = DEFAULT_EMBED_MODEL,
        base_url: str | None = None,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        batch_size: int = 64,
        timeout_s: float = 30.0,
    ):
        self.model = model
        self.base_url = (base_url or os.environ.get("ROUTINECAST_API_BASE") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("ROUTINECAST_API_KEY", "")
        self.client = client or httpx.Client(timeout=timeout_s)
        self.batch_size = batch_size
        self.backend_id = f"http/{model}"

    def _post(self, texts: list[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(
                f"{self.base_url}/embeddings", json={"model": self.model, "input": texts}, headers=headers
            )
        except httpx.HTTPError as exc:
            raise EmbeddingBackendError(f"embedding request failed: {exc!r}") from exc
        if resp.status_code in (401, 403):
            raise EmbeddingBackendError(f"embedding service rejected credentials ({resp.status_code})", retryable=False)
        if resp.status_code >= 400:
            raise EmbeddingBackendError(
                f"embedding service returned {resp.status_code}", retryable=resp.status_code == 429 or resp.status_code >= 500
            )
        try:
            data = resp.json()["data"]
            return [item["embedding"] for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbeddingBackendError(f"unexpected embedding payload: {exc!r}", retryable=False) from exc

    def embed(self, contexts: Sequence[InstanceContext]) -> np.ndarray:
        texts = [context_text(c) for c in contexts]
        rows: list[list[float]] = []
        for i in range(0, len(texts), self.batch_size):
            batch = texts[i : i + self.batch_size]
            got = self._post(batch)
            if len(got) != len(batch):
                raise EmbeddingBackendError(f"asked for {len(batch)} embeddings, got {len(got)}", retryable=False)
            rows.extend(got)
        return _unit_rows(np.asarray(rows, dtype=float).reshape(len(texts), -1))


def featurize_instance(ctx: InstanceContext, embedder: Embedder) -> tuple[str, EmbeddingVector]:
    return context_text(ctx), EmbeddingVector(embedder.embed([ctx])[0], embedder.backend_id)


class VectorIndex:
    """Exact cosine index over unit-normalized rows."""

    def __init__(self, vectors: np.ndarray, items: Sequence[InstanceContext], backend_id: str):
        if len(items) == 0:
            raise DegenerateInputError("cannot index an empty training set")
        if vectors.shape[0] != len(items):
            raise ValueError("one vector per item required")
        self.vectors = _unit_rows(np.asarray(vectors, dtype=float))
        self.vectors.setflags(write=False)
        self.items = tuple(items)
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self.query_count = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def similarities(self, query: np.ndarray) -> np.ndarray:
        with self._lock:
            self.query_count += 1
        q = np.asarray(query, dtype=float)
        return self.vectors @ (q / np.linalg.norm(q))

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        """``k`` best rows by cosine; equal scores keep the lower row first."""
        sims = self.similarities(query)
        order = np.argsort(-sims, kind="stable")[:k]
        return [(int(i), float(sims[i])) for i in order]


def build_index(train_instances: Sequence[InstanceContext], embedder: Embedder) -> VectorIndex:
    return VectorIndex(embedder.embed(train_instances), train_instances, embedder.backend_id)


@dataclass(frozen=True)
class DemonstrationSet:
    items: tuple[InstanceContext, ...]
    indices: tuple[int, ...]
    shot_count: int
    truncated: bool = False  # fewer candidates than requested shots

    def __len__(self) -> int:
        return len(self.items)


EMPTY_DEMOS = DemonstrationSet((), (), 0)


def candidate_pool_size(n: int) -> int:
    return max(50, 5 * n)


def mmr_select(
    index: VectorIndex,
    query_vec: np.ndarray,
    n: int,
    lam: float = 0.5,
    pool_size: int | None = None,
) -> DemonstrationSet:
    """Greedy maximal marginal relevance over the top cosine neighbours.

    The first pick is the most query-similar candidate; each later pick maximizes
    ``lam * cos(q, d) - (1 - lam) * max_s cos(d, s)`` over the selected ``s``.
    Ties go to the lower training index.
    """
    if n < 0:
        raise ConfigError(f"shot count must be nonnegative, got {n}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"MMR lambda must lie in [0, 1], got {lam}")
    if n == 0:
        return EMPTY_DEMOS
    pool = index.top_k(query_vec, pool_size or candidate_pool_size(n))
    ids = np.array([i for i, _ in pool])
    rel = np.array([s for _, s in pool])
    cand = index.vectors[ids]
    pairwise = cand @ cand.T

    chosen: list[int] = []
    remaining = np.ones(len(ids), dtype=bool)
    redundancy = np.full(len(ids), -np.inf)
    while len(chosen) < min(n, len(ids)):
        score = rel if not chosen else lam * rel - (1 - lam) * redundancy
        masked = np.where(remaining, score, -np.inf)
        best = masked.max()
        ties = np.flatnonzero(masked == best)
        pick = int(ties[np.argmin(ids[ties])])
        chosen.append(pick)
        remaining[pick] = False
        redundancy = np.maximum(redundancy, pairwise[pick])
    picked = tuple(int(ids[c]) for c in chosen)
    return DemonstrationSet(
        items=tuple(index.items[i] for i in picked),
        indices=picked,
        shot_count=n,
        truncated=n > len(ids),
    )

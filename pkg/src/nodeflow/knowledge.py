"""Annotated curriculum workflows and embedding-based retrieval over them."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union

import numpy as np
import requests

from .codec import emit_code
from .graph import GraphError, WorkflowGraph, parse_prompt_json, validate
from .registry import NodeSchemaRegistry

log = logging.getLogger(__name__)

WORKFLOW_FILE = "workflow.json"
ANNOTATION_FILE = "annotation.json"

# Function words carry no task signal and only add hash collisions.
STOPWORDS = frozenset(
    "a an the of to in on and or for with by from is are be as at it its this that "
    "then into using use uses used which while so than up out".split()
)


class CorpusError(ValueError):
    pass


class EmbeddingError(RuntimeError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


@dataclass(frozen=True)
class AnnotatedWorkflow:
    name: str
    graph: WorkflowGraph
    code: str
    function: str
    principle: str

    @property
    def retrieval_text(self) -> str:
        return f"{self.function}\n{self.principle}"


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_tag: str

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in values):
            raise EmbeddingError(f"non-finite entry in {self.model_tag} embedding")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RetrievalHit:
    workflow: AnnotatedWorkflow
    score: float


VectorLike = Union[EmbeddingVector, Sequence[float]]


def cosine(a: VectorLike, b: VectorLike) -> float:
    va = np.asarray(a.values if isinstance(a, EmbeddingVector) else a, dtype=np.float64)
    vb = np.asarray(b.values if isinstance(b, EmbeddingVector) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatch(f"cannot compare vectors of dimension {va.size} and {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine similarity of a zero vector is undefined")
    return float(np.dot(va, vb) / (na * nb))


# -- embedding providers ----------------------------------------------------


class Embedder(Protocol):
    model_tag: str
    dimension: Optional[int]

    def embed_batch(self, texts: list[str]) -> list[list[float]]: ...


class HashEmbedder:
    """Deterministic offline embedder based on signed feature hashing of
    lower-cased word unigrams and bigrams, stopwords removed. Good enough to rank curriculum
    annotations by word overlap; used for tests and dry runs."""

    def __init__(self, dimension: int = 512):
        self.dimension = dimension
        self.model_tag = f"hash-{dimension}"
        self.calls = 0

    def _vector(self, text: str) -> list[float]:
        words = [w for w in re.findall(r"[a-z0-9]+", text.lower()) if w not in STOPWORDS]
        features = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
        vec = np.zeros(self.dimension)
        for feature in features:
            digest = hashlib.sha256(feature.encode()).digest()
            index = int.from_bytes(digest[:4], "little") % self.dimension
            vec[index] += 1.0 if digest[4] & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0  # empty or fully cancelled text still gets a usable vector
            norm = 1.0
        return list(vec / norm)

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        self.calls += 1
        return [self._vector(t) for t in texts]


class HttpEmbedder:
    """OpenAI-compatible ``POST {base_url}/embeddings`` client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        dimension: Optional[int] = None,
        max_attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_tag = model
        self.dimension = dimension
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self._api_key = api_key

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        payload = {"model": self.model_tag, "input": texts}
        last = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(
                    f"{self.base_url}/embeddings", json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code in (401, 403):
                    raise EmbeddingError(f"embedding provider rejected credentials ({resp.status_code})")
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise requests.HTTPError(f"HTTP {resp.status_code}")
                resp.raise_for_status()
                data = sorted(resp.json()["data"], key=lambda row: row.get("index", 0))
                return [row["embedding"] for row in data]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
                log.warning("embedding attempt %d/%d failed: %s", attempt, self.max_attempts, exc)
                if attempt < self.max_attempts:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise EmbeddingError(f"embedding provider failed after {self.max_attempts} attempts: {last}")


# -- disk cache -------------------------------------------------------------

_MAGIC = b"NFEV"
_HEADER = struct.Struct("<4sBIH")  # magic, version, dimension, tag length


class EmbeddingCache:
    """One file per (model tag, text digest): a little-endian header followed
    by float64 values. Writes go through a temp file and an atomic rename."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path(self, model_tag: str, text: str) -> Path:
        tag_dir = re.sub(r"[^0-9A-Za-z._-]+", "_", model_tag)
        return self.root / tag_dir / f"{hashlib.sha256(text.encode()).hexdigest()}.vec"

    def get(self, model_tag: str, text: str) -> Optional[EmbeddingVector]:
        path = self.path(model_tag, text)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            magic, _version, dim, tag_len = _HEADER.unpack_from(raw)
            tag = raw[_HEADER.size:_HEADER.size + tag_len].decode()
            body = raw[_HEADER.size + tag_len:]
            if magic != _MAGIC or tag != model_tag or len(body) != 8 * dim:
                raise ValueError("bad header")
            values = struct.unpack(f"<{dim}d", body)
        except (struct.error, ValueError, UnicodeDecodeError):
            log.warning("ignoring corrupt cache entry %s", path)
            return None
        return EmbeddingVector(values, model_tag)

    def put(self, text: str, vector: EmbeddingVector) -> None:
        path = self.path(vector.model_tag, text)
        path.parent.mkdir(parents=True, exist_ok=True)
        tag = vector.model_tag.encode()
        data = _HEADER.pack(_MAGIC, 1, len(vector), len(tag)) + tag + struct.pack(f"<{len(vector)}d", *vector.values)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def _check_dimension(values: list[float], provider: Embedder) -> None:
    expected = getattr(provider, "dimension", None)
    if expected is not None and len(values) != expected:
        raise DimensionMismatch(f"{provider.model_tag} returned {len(values)} dimensions, expected {expected}")


def embed_many(texts: Iterable[str], provider: Embedder, cache: Optional[EmbeddingCache] = None) -> list[EmbeddingVector]:
    texts = list(texts)
    result: list[Optional[EmbeddingVector]] = [None] * len(texts)
    missing = []
    for i, text in enumerate(texts):
        hit = cache.get(provider.model_tag, text) if cache else None
        if hit is not None:
            result[i] = hit
        else:
            missing.append(i)
    if missing:
        unique = list(dict.fromkeys(texts[i] for i in missing))
        try:
            rows = provider.embed_batch(unique)
        except EmbeddingError:
            raise
        except Exception as exc:
            raise EmbeddingError(f"embedding provider failed: {exc}") from exc
        if len(rows) != len(unique):
            raise EmbeddingError(f"provider returned {len(rows)} vectors for {len(unique)} texts")
        fresh = {}
        for text, values in zip(unique, rows):
            _check_dimension(values, provider)
            vector = EmbeddingVector(tuple(values), provider.model_tag)
            if cache:
                cache.put(text, vector)
            fresh[text] = vector
        for i in missing:
            result[i] = fresh[texts[i]]
    return result  # type: ignore[return-value]


def embed(text: str, provider: Embedder, cache: Optional[EmbeddingCache] = None) -> EmbeddingVector:
    return embed_many([text], provider, cache)[0]


# -- store ------------------------------------------------------------------


@dataclass(frozen=True)
class KnowledgeStore:
    workflows: tuple[AnnotatedWorkflow, ...] = ()

    def __post_init__(self) -> None:
        names = [w.name for w in self.workflows]
        if len(set(names)) != len(names):
            raise CorpusError("workflow names must be unique")

    def __len__(self) -> int:
        return len(self.workflows)

    def __contains__(self, name: str) -> bool:
        return any(w.name == name for w in self.workflows)

    @property
    def names(self) -> list[str]:
        return [w.name for w in self.workflows]

    def get(self, name: str) -> Optional[AnnotatedWorkflow]:
        for w in self.workflows:
            if w.name == name:
                return w
        return None


def load_workflow(entry: Path, registry: NodeSchemaRegistry) -> AnnotatedWorkflow:
    name = entry.name
    wf_path, ann_path = entry / WORKFLOW_FILE, entry / ANNOTATION_FILE
    if not ann_path.is_file():
        raise CorpusError(f"workflow {name!r}: missing {ANNOTATION_FILE}")
    try:
        graph = parse_prompt_json(wf_path.read_bytes())
    except (OSError, GraphError) as exc:
        raise CorpusError(f"workflow {name!r}: {exc}") from exc
    report = validate(graph, registry)
    if not report.ok:
        raise CorpusError(f"workflow {name!r} is invalid:\n{report.render()}")
    try:
        annotation = json.loads(ann_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorpusError(f"workflow {name!r}: bad annotation: {exc}") from exc
    function = str(annotation.get("function", "")).strip()
    principle = str(annotation.get("principle", "")).strip()
    if not function or not principle:
        raise CorpusError(f"workflow {name!r}: annotation needs non-empty function and principle")
    return AnnotatedWorkflow(name, graph, emit_code(graph, registry), function, principle)


def ingest_corpus(root: Union[str, Path], registry: NodeSchemaRegistry) -> KnowledgeStore:
    """Load every ``<name>/workflow.json`` + ``<name>/annotation.json`` pair."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"{root} is not a directory")
    entries = sorted(p for p in root.iterdir() if p.is_dir() and (p / WORKFLOW_FILE).is_file())
    return KnowledgeStore(tuple(load_workflow(p, registry) for p in entries))


def rank(query_vec: EmbeddingVector, items: Sequence[tuple[AnnotatedWorkflow, EmbeddingVector]], k: int) -> list[RetrievalHit]:
    hits = [RetrievalHit(w, cosine(query_vec, v)) for w, v in items]
    # Scores equal up to float summation noise are ties and fall back to the name.
    hits.sort(key=lambda h: (-round(h.score, 12), h.workflow.name))
    return hits[:k]


def retrieve(
    store: KnowledgeStore,
    query: str,
    k: int,
    provider: Embedder,
    cache: Optional[EmbeddingCache] = None,
) -> list[RetrievalHit]:
    """Top-k workflows by cosine similarity between the query and each
    workflow's function + principle annotation."""
    if k < 1:
        raise ValueError("k must be positive")
    if not store.workflows:
        return []
    vectors = embed_many([query] + [w.retrieval_text for w in store.workflows], provider, cache)
    return rank(vectors[0], list(zip(store.workflows, vectors[1:])), k)

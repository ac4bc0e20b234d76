"""Embedding index: binary vector file I/O and exact cosine top-k.

The index is an immutable in-memory collection of L2-normalized image
embeddings plus per-id metadata (uri, optional caption).  Cosine similarity
over unit vectors is a plain dot product, so ingestion normalizes once and
queries are a single matrix-vector product followed by a deterministic sort
(score descending, id ascending on ties).  The scan is exact: no ANN
structures, which keeps results oracle-checkable.

Vector file layout (little-endian throughout):

    magic    4 bytes  b"IRAG"
    version  u16      currently 1
    dim      u32      vector dimension
    count    u64      number of records
    then `count` times:
        id_len  u16
        id      utf-8 bytes
        vector  dim * float32

Metadata sidecar: JSON lines, one object per id
``{"id": ..., "uri": ..., "caption": ...?}``.  A line without an "id" key is
treated as sidecar-level metadata and may carry ``embedder_tag`` naming the
embedding space that produced the vectors.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

from .errors import ConfigError, IndexFormatError, TransportError

MAGIC = b"IRAG"
FORMAT_VERSION = 1

# Metric labels carried on hits so downstream stages know what produced a score.
METRIC_COSINE_CLIP = "cosine-clip-space"
METRIC_COSINE_SIGLIP = "cosine-siglip-space"
METRIC_BM25 = "bm25"
METRIC_VLM_RERANK = "vlm-rerank"

_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class RetrievalHit:
    """One retrieved candidate: an index id, its score, and the producing metric."""

    id: str
    score: float
    metric: str


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    uri: str
    caption: str | None = None


@dataclass
class EmbeddingIndex:
    """Immutable collection of unit-norm embeddings; queries never mutate it."""

    dimension: int
    ids: list[str]
    matrix: np.ndarray  # float64, shape (count, dimension), rows unit-norm
    metadata: dict[str, dict]  # id -> {"uri": ..., "caption": ...?}
    embedder_tag: str = "unknown"

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def metric_label(self) -> str:
        return METRIC_COSINE_SIGLIP if "siglip" in self.embedder_tag.lower() else METRIC_COSINE_CLIP

    def record(self, record_id: str) -> EmbeddingRecord:
        meta = self.metadata[record_id]
        row = self.ids.index(record_id)
        return EmbeddingRecord(
            id=record_id,
            vector=self.matrix[row],
            uri=meta.get("uri", ""),
            caption=meta.get("caption"),
        )

    def uri_of(self, record_id: str) -> str:
        return self.metadata[record_id].get("uri", "")

    def caption_of(self, record_id: str) -> str | None:
        return self.metadata[record_id].get("caption")

    def subset(self, keep_ids: Iterable[str]) -> "EmbeddingIndex":
        """New index restricted to `keep_ids`, preserving record order."""
        keep = set(keep_ids)
        rows = [i for i, rid in enumerate(self.ids) if rid in keep]
        ids = [self.ids[i] for i in rows]
        return EmbeddingIndex(
            dimension=self.dimension,
            ids=ids,
            matrix=self.matrix[rows],
            metadata={rid: self.metadata[rid] for rid in ids},
            embedder_tag=self.embedder_tag,
        )


def write_index(
    path: str | os.PathLike,
    ids: Sequence[str],
    vectors: np.ndarray,
    metadata_path: str | os.PathLike | None = None,
    metadata: dict[str, dict] | None = None,
    embedder_tag: str | None = None,
) -> None:
    """Write vectors to the binary format, plus an optional metadata sidecar.

    Vectors are stored as float32 exactly as given; normalization happens at
    ingestion, not here.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError("vectors must be a (len(ids), dim) array")
    dim = vectors.shape[1]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIQ", FORMAT_VERSION, dim, len(ids)))
        for rid, vec in zip(ids, vectors):
            encoded = rid.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(vec.astype("<f4").tobytes())
    if metadata_path is not None:
        with open(metadata_path, "w", encoding="utf-8") as f:
            if embedder_tag is not None:
                f.write(json.dumps({"embedder_tag": embedder_tag}) + "\n")
            for rid in ids:
                entry = {"id": rid}
                entry.update((metadata or {}).get(rid, {"uri": f"file://{rid}"}))
                f.write(json.dumps(entry) + "\n")


def _read_metadata(path: str | os.PathLike) -> tuple[dict[str, dict], str | None]:
    entries: dict[str, dict] = {}
    tag: str | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IndexFormatError(f"metadata line {lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj:
                tag = obj.get("embedder_tag", tag)
                continue
            rid = obj["id"]
            if rid in entries:
                raise IndexFormatError(f"metadata line {lineno}: duplicate id {rid!r}")
            entries[rid] = {k: v for k, v in obj.items() if k != "id"}
    return entries, tag


def ingest(
    records_file: str | os.PathLike,
    metadata_file: str | os.PathLike,
    embedder_tag: str | None = None,
) -> EmbeddingIndex:
    """Load, validate, and normalize an index from its binary + sidecar files.

    Raises IndexFormatError on: malformed/truncated header, zero dimension,
    unsupported version, duplicate or empty ids, zero-norm vectors (named),
    and binary ids missing from the metadata sidecar.
    """
    data = Path(records_file).read_bytes()
    if len(data) < 18 or data[:4] != MAGIC:
        raise IndexFormatError(f"{records_file}: bad magic (not an index file)")
    version, dim, count = struct.unpack_from("<HIQ", data, 4)
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"{records_file}: unsupported version {version}")
    if dim == 0:
        raise IndexFormatError(f"{records_file}: dimension 0")

    metadata, sidecar_tag = _read_metadata(metadata_file)

    ids: list[str] = []
    seen: set[str] = set()
    matrix = np.empty((count, dim), dtype=np.float64)
    offset = 18
    vec_bytes = 4 * dim
    for row in range(count):
        if offset + 2 > len(data):
            raise IndexFormatError(f"{records_file}: truncated at record {row}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise IndexFormatError(f"{records_file}: truncated at record {row}")
        rid = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        if not rid:
            raise IndexFormatError(f"{records_file}: empty id at record {row}")
        if rid in seen:
            raise IndexFormatError(f"{records_file}: duplicate id {rid!r}")
        seen.add(rid)
        if rid not in metadata:
            raise IndexFormatError(f"id {rid!r} missing from metadata sidecar")
        if "uri" not in metadata[rid]:
            raise IndexFormatError(f"metadata for id {rid!r} has no uri")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += vec_bytes
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise IndexFormatError(f"zero-norm vector for id {rid!r}")
        matrix[row] = vec / norm
        ids.append(rid)
    if offset != len(data):
        raise IndexFormatError(f"{records_file}: {len(data) - offset} trailing bytes after {count} records")

    return EmbeddingIndex(
        dimension=dim,
        ids=ids,
        matrix=matrix,
        metadata=metadata,
        embedder_tag=embedder_tag or sidecar_tag or "unknown",
    )


def top_k(index: EmbeddingIndex, query: Sequence[float] | np.ndarray, k: int) -> list[RetrievalHit]:
    """Exact cosine top-k: min(k, count) hits, score descending, ties by id ascending.

    `query` must be unit-norm and match the index dimension; scores are the
    exact float64 dot products.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {index.dimension}")
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-3:
        raise ValueError("query vector must be unit-norm")
    if index.count == 0:
        return []
    scores = index.matrix @ q
    # lexsort uses the last key as primary: score descending, then id ascending.
    order = np.lexsort((np.asarray(index.ids), -scores))
    metric = index.metric_label
    return [
        RetrievalHit(id=index.ids[i], score=float(scores[i]), metric=metric)
        for i in order[: min(k, index.count)]
    ]


class EmbedderClient(Protocol):
    """Maps text or image refs into one embedding space, named by `tag`."""

    tag: str

    def embed_text(self, text: str) -> Sequence[float]: ...

    def embed_image(self, ref: str) -> Sequence[float]: ...


def embed_text(embedder: EmbedderClient, text: str, expect_dim: int | None = None) -> np.ndarray:
    """Embed text via the client and L2-normalize the result.

    Rejects empty text, zero vectors, and (when `expect_dim` is given)
    dimension mismatches with the target index.
    """
    if not text:
        raise ValueError("text must be non-empty")
    vec = np.asarray(embedder.embed_text(text), dtype=np.float64)
    return _normalize(vec, expect_dim, what=f"text embedding from {embedder.tag!r}")


def embed_image(embedder: EmbedderClient, ref: str, expect_dim: int | None = None) -> np.ndarray:
    if not ref:
        raise ValueError("image ref must be non-empty")
    vec = np.asarray(embedder.embed_image(ref), dtype=np.float64)
    return _normalize(vec, expect_dim, what=f"image embedding from {embedder.tag!r}")


def _normalize(vec: np.ndarray, expect_dim: int | None, what: str) -> np.ndarray:
    if vec.ndim != 1:
        raise ValueError(f"{what}: expected a flat vector, got shape {vec.shape}")
    if expect_dim is not None and vec.shape[0] != expect_dim:
        raise ValueError(f"{what}: dimension {vec.shape[0]} does not match index dimension {expect_dim}")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError(f"{what}: zero-norm vector")
    return vec / norm


class HttpEmbedderClient:
    """Embedding service client: POST {model, kind, input} -> {embedding: [...]}."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        tag: str | None = None,
        timeout: float = 30.0,
        transport_retries: int = 2,
        api_key: str | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.tag = tag or model
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.api_key = api_key

    def _post(self, kind: str, value: str) -> list[float]:
        body = {"model": self.model, "kind": kind, "input": value}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for _ in range(self.transport_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["embedding"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
        raise TransportError(f"embedder {self.tag!r} failed after {self.transport_retries + 1} attempts: {last}")

    def embed_text(self, text: str) -> list[float]:
        return self._post("text", text)

    def embed_image(self, ref: str) -> list[float]:
        return self._post("image", ref)


def _hash_unit_vector(key: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-embedding: sha256-expanded bytes -> unit vector.

    Stable across platforms and library versions (no RNG involved).
    """
    raw = bytearray()
    counter = 0
    while len(raw) < dim * 8:
        raw += hashlib.sha256(f"{key}#{counter}".encode("utf-8")).digest()
        counter += 1
    ints = np.frombuffer(bytes(raw[: dim * 8]), dtype="<u8")
    vec = (ints.astype(np.float64) / np.float64(2**64)) * 2.0 - 1.0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # astronomically unlikely; keep total
        vec = np.ones(dim) / np.sqrt(dim)
        return vec
    return vec / norm


class HashEmbedder:
    """Deterministic mock embedder: every input maps to a stable unit vector."""

    def __init__(self, dim: int, tag: str = "mock-clip", seed: str = ""):
        if dim < 1:
            raise ConfigError("HashEmbedder dim must be >= 1")
        self.dim = dim
        self.tag = tag
        self.seed = seed

    def _vec(self, kind: str, value: str) -> list[float]:
        return _hash_unit_vector(f"{self.seed}|{self.tag}|{kind}|{value}", self.dim).tolist()

    def embed_text(self, text: str) -> list[float]:
        return self._vec("text", text)

    def embed_image(self, ref: str) -> list[float]:
        return self._vec("image", ref)


@dataclass
class MappingEmbedder:
    """Scripted mock embedder backed by explicit lookup tables.

    Unknown inputs fall back to hash vectors when `strict` is False,
    otherwise raise KeyError.
    """

    dim: int
    tag: str = "mock-clip"
    texts: dict[str, Sequence[float]] = field(default_factory=dict)
    images: dict[str, Sequence[float]] = field(default_factory=dict)
    strict: bool = True

    def embed_text(self, text: str) -> Sequence[float]:
        if text in self.texts:
            return self.texts[text]
        if self.strict:
            raise KeyError(f"no scripted text embedding for {text!r}")
        return _hash_unit_vector(f"{self.tag}|text|{text}", self.dim).tolist()

    def embed_image(self, ref: str) -> Sequence[float]:
        if ref in self.images:
            return self.images[ref]
        if self.strict:
            raise KeyError(f"no scripted image embedding for {ref!r}")
        return _hash_unit_vector(f"{self.tag}|image|{ref}", self.dim).tolist()

"""Export jobs: walk the input, embed in batches, write index + sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ExportError
from .models import load_model
from .writer import write_sidecar, write_vectors

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExportJob:
    input_path: str
    model_tag: str
    out: str
    meta_out: str | None = None  # default: <out>.meta.jsonl
    batch_size: int = 32

    @property
    def resolved_meta_out(self) -> str:
        return self.meta_out or f"{self.out}.meta.jsonl"


@dataclass
class ExportSummary:
    count: int
    dimension: int
    model_tag: str
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "dimension": self.dimension,
            "model": self.model_tag,
            "failures": self.failures,
        }


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def export_images(job: ExportJob) -> ExportSummary:
    """Embed every image under the input directory (ids are relative paths).

    Unreadable files are skipped and listed in the summary; an input that
    yields no records at all is an error.
    """
    model = load_model(job.model_tag)
    if not model.handles_images:
        raise ExportError(f"model {job.model_tag!r} cannot embed images")
    root = Path(job.input_path)
    if not root.is_dir():
        raise ExportError(f"{root} is not a directory")
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ExportError(f"no images found under {root}")

    ids: list[str] = []
    entries: list[dict] = []
    chunks: list[np.ndarray] = []
    failures: list[str] = []
    for batch in _batches(paths, max(1, job.batch_size)):
        readable = []
        for path in batch:
            try:
                from PIL import Image

                with Image.open(path) as img:
                    img.verify()
                readable.append(path)
            except Exception:
                failures.append(str(path.relative_to(root)))
        if not readable:
            continue
        chunks.append(model.embed_images(readable))
        for path in readable:
            rid = path.relative_to(root).as_posix()
            ids.append(rid)
            entries.append({"id": rid, "uri": path.resolve().as_uri()})

    if not ids:
        raise ExportError(f"no readable images under {root}")
    vectors = np.vstack(chunks)
    write_vectors(job.out, ids, vectors)
    write_sidecar(job.resolved_meta_out, entries, embedder_tag=job.model_tag)
    return ExportSummary(count=len(ids), dimension=model.dim, model_tag=job.model_tag, failures=failures)


def export_texts(job: ExportJob) -> ExportSummary:
    """Embed a JSONL caption list ({"id", "caption"} per line)."""
    model = load_model(job.model_tag)
    if not model.handles_texts:
        raise ExportError(f"model {job.model_tag!r} cannot embed texts")
    path = Path(job.input_path)
    if not path.is_file():
        raise ExportError(f"{path} is not a file")

    ids: list[str] = []
    captions: list[str] = []
    failures: list[str] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        rid, caption = obj["id"], obj["caption"]
        if rid in seen:
            raise ExportError(f"duplicate caption id {rid!r} (line {lineno})")
        seen.add(rid)
        if not caption.strip():
            failures.append(rid)
            continue
        ids.append(rid)
        captions.append(caption)
    if not ids:
        raise ExportError(f"no usable captions in {path}")

    chunks = [model.embed_texts(batch) for batch in _batches(captions, max(1, job.batch_size))]
    vectors = np.vstack(chunks)
    norms = np.linalg.norm(vectors, axis=1)
    dead = [ids[i] for i in np.nonzero(norms == 0)[0]]
    if dead:
        keep = norms > 0
        failures.extend(dead)
        vectors = vectors[keep]
        ids = [rid for rid, ok in zip(ids, keep) if ok]
        captions = [c for c, ok in zip(captions, keep) if ok]
        if not ids:
            raise ExportError("every caption embedded to a zero vector")

    vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    entries = [
        {"id": rid, "uri": f"text://{rid}", "caption": caption}
        for rid, caption in zip(ids, captions)
    ]
    write_vectors(job.out, ids, vectors.astype(np.float32))
    write_sidecar(job.resolved_meta_out, entries, embedder_tag=job.model_tag)
    return ExportSummary(count=len(ids), dimension=model.dim, model_tag=job.model_tag, failures=failures)

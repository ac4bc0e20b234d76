"""Index binary writer, bit-exact against the retrieval engine's reader.

Layout (all little-endian): magic b"IRAG", version u16 (1), dimension u32,
count u64, then per record [id_len u16][id utf-8][dimension x float32].
The metadata sidecar is JSON lines: a leading {"embedder_tag": ...} line
naming the embedding space, then {"id", "uri", "caption"?} per record.
Files are written to a temp path and renamed, so readers never see a
partial export.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IRAG"
FORMAT_VERSION = 1


def write_vectors(path: str | Path, ids: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise ValueError("vectors must be (len(ids), dim)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIQ", FORMAT_VERSION, vectors.shape[1], len(ids)))
        for rid, vec in zip(ids, vectors):
            encoded = rid.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(vec.astype("<f4").tobytes())
    os.replace(tmp, path)


def write_sidecar(path: str | Path, entries: list[dict], embedder_tag: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(json.dumps({"embedder_tag": embedder_tag}) + "\n")
        for entry in entries:
            f.write(json.dumps(entry) + "\n")
    os.replace(tmp, path)

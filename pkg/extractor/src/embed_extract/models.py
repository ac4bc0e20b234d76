"""Embedding models behind a tag registry.

Two deterministic feature models ship built in and run fully offline:

  patch-project-64   images: 16x16 RGB patch grid, standardized and projected
                     through a fixed pseudo-random matrix to 64 dims
  hash-bow-64        texts: signed hashing-trick bag of words into 64 buckets

Both are honest fixed-preprocessing embedding spaces (queries and documents
embedded the same way land near each other), which is all the offline tests
and fixtures need.  `clip-vit-b32` loads a real CLIP via `transformers` when
the weights are available locally and aborts with ModelLoadError otherwise;
exports record the model tag in the sidecar either way, so an index is never
silently queried with the wrong embedder.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np
from PIL import Image

from . import ModelLoadError

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def _fixed_matrix(key: str, rows: int, cols: int) -> np.ndarray:
    """Pseudo-random projection matrix derived from sha256, no RNG state."""
    raw = bytearray()
    counter = 0
    need = rows * cols * 4
    while len(raw) < need:
        raw += hashlib.sha256(f"{key}#{counter}".encode()).digest()
        counter += 1
    ints = np.frombuffer(bytes(raw[:need]), dtype="<u4").astype(np.float64)
    flat = (ints / np.float64(2**32)) * 2.0 - 1.0
    return flat.reshape(rows, cols)


class PatchProjectImageModel:
    """Deterministic image features: downsampled patch grid -> fixed projection."""

    tag = "patch-project-64"
    dim = 64
    handles_images = True
    handles_texts = False
    _side = 16

    def __init__(self):
        self._projection = _fixed_matrix("patch-project-64", self._side * self._side * 3, self.dim)

    def embed_images(self, paths) -> np.ndarray:
        out = np.empty((len(paths), self.dim), dtype=np.float32)
        for i, path in enumerate(paths):
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize((self._side, self._side), Image.Resampling.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0
            pixels = (pixels - pixels.mean()) / (pixels.std() + 1e-8)
            vec = pixels @ self._projection
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                vec = np.ones(self.dim)
                norm = np.linalg.norm(vec)
            out[i] = (vec / norm).astype(np.float32)
        return out

    def embed_texts(self, texts):
        raise ModelLoadError(f"{self.tag} embeds images, not texts")


class HashBowTextModel:
    """Deterministic text features: signed token hashing into fixed buckets."""

    tag = "hash-bow-64"
    dim = 64
    handles_images = False
    handles_texts = True

    def embed_texts(self, texts) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            acc = np.zeros(self.dim, dtype=np.float64)
            for token in _TOKEN_SPLIT.split(text.lower()):
                if not token:
                    continue
                digest = hashlib.sha256(token.encode()).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                acc[bucket] += sign
            norm = np.linalg.norm(acc)
            if norm > 0:
                out[i] = (acc / norm).astype(np.float32)
            # all-zero rows are left for the caller to reject per-record
        return out

    def embed_images(self, paths):
        raise ModelLoadError(f"{self.tag} embeds texts, not images")


class ClipModel:
    """Real CLIP ViT-B/32 through `transformers`; needs local weights."""

    tag = "clip-vit-b32"
    dim = 512
    handles_images = True
    handles_texts = True

    def __init__(self):
        try:
            from transformers import CLIPModel, CLIPProcessor  # heavy import, keep it lazy
        except ImportError as exc:
            raise ModelLoadError(f"{self.tag}: transformers is not installed ({exc})") from exc
        try:
            self._model = CLIPModel.from_pretrained("openai/clip-vit-base-patch32")
            self._processor = CLIPProcessor.from_pretrained("openai/clip-vit-base-patch32")
        except Exception as exc:
            raise ModelLoadError(
                f"{self.tag}: cannot load weights (offline or not cached): {exc}"
            ) from exc

    def embed_images(self, paths) -> np.ndarray:
        import torch

        images = [Image.open(p).convert("RGB") for p in paths]
        inputs = self._processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats.numpy().astype(np.float32)

    def embed_texts(self, texts) -> np.ndarray:
        import torch

        inputs = self._processor(text=list(texts), return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.numpy().astype(np.float32)


_REGISTRY = {
    PatchProjectImageModel.tag: PatchProjectImageModel,
    HashBowTextModel.tag: HashBowTextModel,
    ClipModel.tag: ClipModel,
}


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def load_model(tag: str):
    if tag not in _REGISTRY:
        from . import ExportError

        raise ExportError(f"unknown model {tag!r}; available: {', '.join(available_models())}")
    return _REGISTRY[tag]()

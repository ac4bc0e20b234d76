"""A constructed world for end-to-end evaluation tests.

Each class k has a true direction e_k in embedding space.  The mock T2I's
notion of a prompt (its "prior") is deliberately skewed: mostly a
hallucination direction h_k orthogonal to e_k, with only a small e_k
component.  The eval embedder reads mock artifacts (JSON manifests) and
models the backend output as the normalized mean of the prompt prior and the
reference-image embeddings.  References live near e_k, so runs that retrieve
and attach them provably move the output toward e_k, while plain generation
stays near the prior.  This gives the grid a world where the full method must
beat the base, by construction rather than by luck.
"""

import json
import re
from pathlib import Path

import numpy as np

from imagerag.index import EmbeddingIndex, MappingEmbedder, _hash_unit_vector

_CLASS_TOKEN = re.compile(r"specimen-(\d+)")


class SyntheticWorld:
    def __init__(self, n_classes=20, dim=16, refs_per_class=2, seed=0, prior_signal=0.2):
        rng = np.random.default_rng(seed)
        self.class_ids = [f"specimen-{i:02d}" for i in range(n_classes)]
        e = rng.standard_normal((n_classes, dim))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        h = rng.standard_normal((n_classes, dim))
        h -= (np.sum(h * e, axis=1, keepdims=True)) * e  # orthogonal to the true direction
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        self.dim = dim
        self.true_dir = {cid: e[i] for i, cid in enumerate(self.class_ids)}
        self.halluc_dir = {cid: h[i] for i, cid in enumerate(self.class_ids)}
        self.prior_signal = prior_signal

        ids, vectors, metadata = [], [], {}
        self.uri_vectors = {}
        for i, cid in enumerate(self.class_ids):
            for j in range(refs_per_class):
                vec = e[i] + 0.05 * rng.standard_normal(dim)
                vec /= np.linalg.norm(vec)
                rid = f"db-{cid}-{j}"
                uri = f"db://{cid}/{j}"
                ids.append(rid)
                vectors.append(vec)
                metadata[rid] = {"uri": uri, "caption": f"a photo of a {cid}"}
                self.uri_vectors[uri] = vec
        self.index = EmbeddingIndex(
            dimension=dim,
            ids=ids,
            matrix=np.array(vectors),
            metadata=metadata,
            embedder_tag="mock-clip",
        )

    def prompt_for(self, cid):
        return f"a photo of a {cid}"

    def caption_for(self, cid):
        return f"a detailed photo of a {cid}"

    def retrieval_embedder(self):
        texts = {}
        for cid in self.class_ids:
            texts[self.caption_for(cid)] = self.true_dir[cid].tolist()
            texts[self.prompt_for(cid)] = self.true_dir[cid].tolist()
            texts[cid] = self.true_dir[cid].tolist()
        return MappingEmbedder(dim=self.dim, tag="mock-clip", texts=texts)

    def vlm_responses_full_method(self, with_decision=True):
        responses = []
        for cid in self.class_ids:
            if with_decision:
                responses.append("no")
            responses.append(cid)  # the missing concept
            responses.append(self.caption_for(cid))
        return responses

    def _class_of(self, text):
        match = _CLASS_TOKEN.search(text)
        return f"specimen-{match.group(1)}" if match else None

    def prior(self, prompt):
        """The mock backend's flawed internal embedding of a prompt."""
        cid = self._class_of(prompt)
        if cid is None:
            return _hash_unit_vector(f"prior|{prompt}", self.dim)
        vec = self.prior_signal * self.true_dir[cid] + self.halluc_dir[cid]
        return vec / np.linalg.norm(vec)

    def eval_embedder(self):
        return SyntheticEvalEmbedder(self)


class SyntheticEvalEmbedder:
    """Evaluation-space embedder over the synthetic world.

    Text maps to the class's true direction; a mock artifact maps to the
    normalized mean of its prompt prior and its reference embeddings.
    """

    def __init__(self, world: SyntheticWorld, tag="synthetic-eval"):
        self.world = world
        self.tag = tag

    def embed_text(self, text):
        cid = self.world._class_of(text)
        if cid is None:
            return _hash_unit_vector(f"eval-text|{text}", self.world.dim).tolist()
        return self.world.true_dir[cid].tolist()

    def embed_image(self, ref):
        return self._embed_image(ref).tolist()

    def _embed_image(self, ref):
        if ref in self.world.uri_vectors:
            return self.world.uri_vectors[ref]
        path = Path(ref)
        if path.suffix == ".json" and path.exists():
            manifest = json.loads(path.read_text(encoding="utf-8"))
            request = manifest["request"]
            parts = [self.world.prior(request["prompt"])]
            parts.extend(self._embed_image(r) for r in request["images"])
            mean = np.mean(parts, axis=0)
            return mean / np.linalg.norm(mean)
        return _hash_unit_vector(f"eval-image|{ref}", self.world.dim)

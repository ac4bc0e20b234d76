"""End-to-end run: generate, judge, caption, retrieve, regenerate.

One run is a single round of augmentation:

    initial-gen -> decision -> vlm-loop -> retrieval -> [rerank] -> final-gen

If the decision step says the initial image already matches the prompt, the
run ends there and the initial image is the final one.  Otherwise the VLM
loop produces one retrieval caption per missing concept, each caption pulls
its reference images from the index sources, and the backend regenerates from
the reference-augmented prompt.  Every run owns a directory holding the
initial and final artifacts plus ``trace.json``, an append-only record of
everything that happened; replaying with the same scripted clients and seeds
reproduces the trace byte for byte (timings aside).
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .backends import (
    BackendProfile,
    GenerationParams,
    generate,
    load_profile,
    render_personalized,
    render_template,
)
from .errors import ConfigError, PipelineError
from .index import EmbeddingIndex, EmbedderClient, RetrievalHit, ingest
from .retrieval import bm25_rerank, build_pool, vlm_rerank
from .vlm import (
    ConceptCaption,
    RetryPolicy,
    decide_match,
    retrieval_caption_generation,
)

STAGE_INITIAL_GEN = "initial-gen"
STAGE_DECISION = "decision"
STAGE_VLM_LOOP = "vlm-loop"
STAGE_RETRIEVAL = "retrieval"
STAGE_RERANK = "rerank"
STAGE_FINAL_GEN = "final-gen"

CANONICAL_STAGE_ORDER = [
    STAGE_INITIAL_GEN,
    STAGE_DECISION,
    STAGE_VLM_LOOP,
    STAGE_RETRIEVAL,
    STAGE_RERANK,
    STAGE_FINAL_GEN,
]

RERANK_MODES = ("none", "bm25", "vlm")
CAPTION_MODES = ("captions", "concepts", "prompt")


@dataclass
class PipelineConfig:
    concepts_per_prompt: int = 3
    images_per_concept: int = 1
    per_source_k: int | None = None  # resolved: 3 when re-ranking, else images_per_concept
    rerank: str = "none"
    skip_decision: bool = False
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    backend_profile: str = "omnigen"
    indexes: list[dict] = field(default_factory=list)  # {"vectors": ..., "metadata": ...}
    caption_mode: str = "captions"  # "concepts"/"prompt" are ablation variants
    initial_seed: int | None = None
    final_seed: int | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        if self.rerank not in RERANK_MODES:
            raise ConfigError(f"rerank must be one of {RERANK_MODES}, got {self.rerank!r}")
        if self.caption_mode not in CAPTION_MODES:
            raise ConfigError(f"caption_mode must be one of {CAPTION_MODES}, got {self.caption_mode!r}")
        if self.concepts_per_prompt < 1 or self.images_per_concept < 1:
            raise ConfigError("concepts_per_prompt and images_per_concept must be >= 1")

    @property
    def resolved_per_source_k(self) -> int:
        if self.per_source_k is not None:
            return self.per_source_k
        return 3 if self.rerank != "none" else self.images_per_concept

    def validate_against(self, profile: BackendProfile) -> None:
        cap = profile.capabilities.max_reference_images
        if self.concepts_per_prompt * self.images_per_concept > cap:
            raise ConfigError(
                f"{self.concepts_per_prompt} concepts x {self.images_per_concept} images "
                f"exceed the {profile.name} cap of {cap}"
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if "retry_policy" in raw:
            rp = raw["retry_policy"]
            raw["retry_policy"] = RetryPolicy(
                max_repetitions=rp.get("max_repetitions", 3),
                temperature_schedule=tuple(rp.get("temperature_schedule", (0.4, 0.7, 1.0))),
                initial_temperature=rp.get("initial_temperature", 0.0),
            )
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["retry_policy"]["temperature_schedule"] = list(self.retry_policy.temperature_schedule)
        return d


@dataclass
class PipelineClients:
    """Shared service handles: one VLM, one T2I backend, embedders keyed by
    the embedding-space tag of the index they query."""

    vlm: object
    t2i: object
    embedders: dict[str, EmbedderClient]
    indexes: list[EmbeddingIndex] | None = None  # preloaded; otherwise config paths are ingested


@dataclass
class PipelineTrace:
    data: dict
    path: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def stages(self) -> list[str]:
        return self.data["stages"]

    @property
    def final_image(self) -> str | None:
        final = self.data.get("final")
        return final["image"] if final else None


def _dump_trace(data: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _hit_dict(hit: RetrievalHit) -> dict:
    return {"id": hit.id, "score": hit.score, "metric": hit.metric}


def _load_sources(config: PipelineConfig, clients: PipelineClients):
    indexes = clients.indexes
    if indexes is None:
        if not config.indexes:
            raise ConfigError("no index sources configured")
        indexes = [
            ingest(entry["vectors"], entry["metadata"], entry.get("embedder_tag"))
            for entry in config.indexes
        ]
    sources = []
    for index in indexes:
        embedder = clients.embedders.get(index.embedder_tag)
        if embedder is None:
            raise ConfigError(f"no embedder client for embedding space {index.embedder_tag!r}")
        sources.append((index, embedder))
    return sources


def _select_references(
    ranked_per_caption: list[list[RetrievalHit]],
    images_per_concept: int,
) -> list[list[RetrievalHit]]:
    """Top hits per caption, deduplicated across captions.

    A collision takes the caption's next-best hit, so a reference is never
    attached twice; a caption whose candidates are exhausted gets fewer (or
    zero) references.
    """
    used: set[str] = set()
    selected: list[list[RetrievalHit]] = []
    for ranked in ranked_per_caption:
        mine: list[RetrievalHit] = []
        for hit in ranked:
            if hit.id in used:
                continue
            mine.append(hit)
            used.add(hit.id)
            if len(mine) == images_per_concept:
                break
        selected.append(mine)
    return selected


class _Run:
    """Stage bookkeeping for one pipeline execution."""

    def __init__(self, prompt: str, config: PipelineConfig, run_id: str | None):
        self.run_id = run_id or f"run-{time.strftime('%Y%m%d-%H%M%S')}-{os.urandom(3).hex()}"
        self.dir = Path(config.out_dir) / self.run_id
        self.trace: dict = {
            "run_id": self.run_id,
            "prompt": prompt,
            "config": config.to_dict(),
            "stages": [],
            "timings": {},
        }
        self._t0 = 0.0

    def begin(self, stage: str) -> None:
        self.trace["stages"].append(stage)
        self._t0 = time.monotonic()

    def end(self, stage: str) -> None:
        self.trace["timings"][stage] = time.monotonic() - self._t0

    @property
    def trace_path(self) -> Path:
        return self.dir / "trace.json"

    def persist(self) -> PipelineTrace:
        _dump_trace(self.trace, self.trace_path)
        return PipelineTrace(data=self.trace, path=self.trace_path)


def run(
    prompt: str,
    config: PipelineConfig,
    clients: PipelineClients,
    run_id: str | None = None,
    subject_image: str | None = None,
) -> PipelineTrace:
    """Execute one run; returns the persisted trace.

    Hard errors (transport, config, backend) abort the run but persist the
    trace up to the failure point before raising PipelineError.
    """
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    profile = load_profile(config.backend_profile)
    cap = profile.capabilities.max_reference_images
    if subject_image is None:
        config.validate_against(profile)
    elif not profile.capabilities.supports_personal_subject:
        raise ConfigError(f"backend {profile.name!r} does not support a personal subject image")

    state = _Run(prompt, config, run_id)
    if subject_image is not None:
        state.trace["subject_image"] = subject_image
    try:
        _execute(prompt, config, clients, profile, cap, state, subject_image)
    except Exception as exc:
        state.trace["error"] = f"{type(exc).__name__}: {exc}"
        state.persist()
        raise PipelineError(f"run {state.run_id} failed: {exc}") from exc
    return state.persist()


def run_personalized(
    prompt: str,
    subject_image: str,
    config: PipelineConfig,
    clients: PipelineClients,
    run_id: str | None = None,
) -> PipelineTrace:
    """Pipeline run that keeps a user subject image as the first attachment;
    retrieval fills the remaining reference slots."""
    return run(prompt, config, clients, run_id=run_id, subject_image=subject_image)


def _execute(prompt, config, clients, profile, cap, state: _Run, subject_image):
    vlm = clients.vlm
    policy = config.retry_policy

    state.begin(STAGE_INITIAL_GEN)
    initial = generate(
        clients.t2i,
        prompt,
        GenerationParams(seed=config.initial_seed),
        out_stem=state.dir / "initial",
    )
    state.trace["initial"] = {
        "image": initial.image,
        "backend_request": initial.backend_request,
        "params_used": initial.params_used.to_wire(),
    }
    state.end(STAGE_INITIAL_GEN)

    state.begin(STAGE_DECISION)
    if config.skip_decision:
        state.trace["decision"] = {"skipped": True}
    else:
        decision = decide_match(vlm, prompt, initial.image, temperature=policy.initial_temperature)
        state.trace["decision"] = {
            "skipped": False,
            "matches": decision.matches,
            "raw_response": decision.raw_response,
        }
        if decision.matches:
            state.trace["final"] = state.trace["initial"]
            state.end(STAGE_DECISION)
            return
    state.end(STAGE_DECISION)

    # A personalized run reserves one attachment slot for the subject.
    budget = cap - 1 if subject_image is not None else cap
    max_concepts = min(config.concepts_per_prompt, max(1, budget // config.images_per_concept))

    state.begin(STAGE_VLM_LOOP)
    captions = _retrieval_captions(vlm, prompt, initial.image, config, policy, state, max_concepts)
    state.end(STAGE_VLM_LOOP)

    state.begin(STAGE_RETRIEVAL)
    sources = _load_sources(config, clients)
    pools = [build_pool(c.caption, config.resolved_per_source_k, sources) for c in captions]
    retrieval_entries = [
        {"concept": c.concept, "caption": c.caption, "pool": [_hit_dict(cand.hit) for cand in pool.candidates]}
        for c, pool in zip(captions, pools)
    ]
    state.trace["retrieval"] = retrieval_entries
    state.end(STAGE_RETRIEVAL)

    ranked_per_caption = [pool.cosine_order for pool in pools]
    if config.rerank != "none":
        state.begin(STAGE_RERANK)
        ranked_per_caption = _rerank(pools, captions, config, vlm, retrieval_entries)
        state.end(STAGE_RERANK)

    selected = _select_references(ranked_per_caption, config.images_per_concept)
    groups = []
    uri_lookup = {}
    for index, _ in sources:
        for rid in index.ids:
            uri_lookup.setdefault(rid, index.uri_of(rid))
    for caption, hits in zip(captions, selected):
        if not hits:
            continue
        groups.append((caption.caption, [uri_lookup[h.id] for h in hits]))
    for entry, hits in zip(retrieval_entries, selected):
        entry["selected"] = [h.id for h in hits]
    if not groups:
        raise PipelineError("retrieval produced no usable references")

    state.begin(STAGE_FINAL_GEN)
    if subject_image is not None:
        augmented = render_personalized(
            prompt, subject_image, groups, profile.capabilities, profile.placeholder_style
        )
    else:
        augmented = render_template(prompt, groups, profile.placeholder_style, max_images=cap)
    state.trace["final_prompt"] = {
        "text": augmented.text,
        "images": augmented.images,
        "groups": [{"caption": c, "images": refs} for c, refs in augmented.groups],
    }
    final = generate(
        clients.t2i,
        augmented,
        GenerationParams(seed=config.final_seed),
        out_stem=state.dir / "final",
    )
    state.trace["final"] = {
        "image": final.image,
        "backend_request": final.backend_request,
        "params_used": final.params_used.to_wire(),
    }
    state.end(STAGE_FINAL_GEN)


def _retrieval_captions(vlm, prompt, image, config, policy, state, max_concepts) -> list[ConceptCaption]:
    if config.caption_mode == "prompt":
        state.trace["vlm"] = {"mode": "prompt", "attempts": [], "fallback_used": False}
        return [ConceptCaption(concept=prompt, caption=prompt)]

    result = retrieval_caption_generation(vlm, prompt, image, policy, max_concepts=max_concepts)
    captions = result.captions[:max_concepts]
    if config.caption_mode == "concepts":
        # Ablation: retrieve with the raw concept phrases instead of captions.
        captions = [ConceptCaption(concept=c.concept, caption=c.concept) for c in captions]
    state.trace["vlm"] = {
        "mode": config.caption_mode,
        "attempts": [{"temperature": a.temperature, "outcome": a.outcome} for a in result.attempts],
        "fallback_used": result.fallback_used,
        "count_mismatch": result.count_mismatch,
        "captions": [{"concept": c.concept, "caption": c.caption} for c in captions],
    }
    return captions


def _rerank(pools, captions, config, vlm, retrieval_entries) -> list[list[RetrievalHit]]:
    ranked_per_caption = []
    for pool, caption, entry in zip(pools, captions, retrieval_entries):
        if config.rerank == "bm25":
            ranked = bm25_rerank(pool, caption.caption)
            entry["reranked"] = [_hit_dict(h) for h in ranked]
        else:
            result = vlm_rerank(pool, caption.caption, vlm)
            ranked = result.hits
            entry["reranked"] = [_hit_dict(h) for h in ranked]
            entry["rerank_fallback"] = result.fallback
        ranked_per_caption.append(ranked)
    return ranked_per_caption


def load_trace(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))

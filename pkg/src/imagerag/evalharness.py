"""Evaluation harness: similarity metrics, aggregation, experiment grids.

Scores are embedding cosines: text-to-image similarity in a CLIP-style or
SigLIP-style space, and image-to-image similarity in a DINO-style space.
Evaluation embedders are deliberately separate client instances from the
retrieval embedders, since retrieval and evaluation typically use different
spaces.  Aggregates report mean and standard error of the mean (sample
standard deviation over sqrt(n)).

The grid runner drives method variants per class:

    base              plain generation from the prompt
    rephrased-prompt  VLM rephrases the prompt, then plain generation
    retrieve-concepts retrieval queried with raw concept phrases
    retrieve-prompt   retrieval queried with the prompt itself
    full-method       the full caption pipeline

plus seeded nested-subset sweeps over retrieval dataset size (a size-s subset
is always contained in the size-s' subset for s < s').  Cell failures are
recorded and the grid keeps going.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import GenerationParams, generate
from .errors import ConfigError
from .index import EmbeddingIndex, EmbedderClient, embed_image, embed_text
from .pipeline import PipelineClients, PipelineConfig, run
from .vlm import rephrase_prompt

METRIC_CLIP_T2I = "clip-t2i"
METRIC_SIGLIP_T2I = "siglip-t2i"
METRIC_DINO_I2I = "dino-i2i"
METRICS = (METRIC_CLIP_T2I, METRIC_SIGLIP_T2I, METRIC_DINO_I2I)

VARIANTS = ("base", "rephrased-prompt", "retrieve-concepts", "retrieve-prompt", "full-method")


@dataclass(frozen=True)
class ScoreSample:
    class_id: str
    metric: str
    value: float


@dataclass(frozen=True)
class AggregateCell:
    mean: float
    sem: float
    n: int
    degenerate: bool = False  # n == 1: a standard error is meaningless


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    variant: str
    retrieval_set: str = "default"
    subset_size: int | None = None
    rerank: str = "none"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class ClassSpec:
    class_id: str
    prompt: str
    real_images: tuple[str, ...] = ()


def load_class_list(path: str | Path) -> list[ClassSpec]:
    """JSONL class list: {"class_id", "prompt", "real_images": [uris]}."""
    classes = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        classes.append(
            ClassSpec(
                class_id=obj["class_id"],
                prompt=obj["prompt"],
                real_images=tuple(obj.get("real_images", ())),
            )
        )
    return classes


def text_image_score(embedder: EmbedderClient, text: str, image: str) -> float:
    """Cosine similarity between unit-normalized text and image embeddings."""
    t = embed_text(embedder, text)
    v = embed_image(embedder, image)
    if t.shape != v.shape:
        raise ValueError(f"embedder {embedder.tag!r} returned mismatched dimensions")
    return float(np.dot(t, v))


def image_image_score(embedder: EmbedderClient, a: str, b: str) -> float:
    va = embed_image(embedder, a)
    vb = embed_image(embedder, b)
    if va.shape != vb.shape:
        raise ValueError(f"embedder {embedder.tag!r} returned mismatched dimensions")
    return float(np.dot(va, vb))


def aggregate(samples) -> AggregateCell:
    """Mean and SEM of the sample values (ScoreSamples or plain floats).

    SEM is the n-1 sample standard deviation divided by sqrt(n); a single
    sample yields SEM 0 with the degenerate flag set.
    """
    values = [s.value if isinstance(s, ScoreSample) else float(s) for s in samples]
    if not values:
        raise ValueError("aggregate requires at least one sample")
    n = len(values)
    mean = statistics.fmean(values)
    if n == 1:
        return AggregateCell(mean=mean, sem=0.0, n=1, degenerate=True)
    sem = statistics.stdev(values) / (n**0.5)
    return AggregateCell(mean=mean, sem=sem, n=n)


def nested_subset_ids(index: EmbeddingIndex, size: int, seed: int) -> list[str]:
    """First `size` ids of a seeded permutation; prefixes nest by construction."""
    if size < 1 or size > index.count:
        raise ConfigError(f"subset size {size} out of range for index of {index.count}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(index.count)
    return [index.ids[i] for i in perm[:size]]


def nested_subset(index: EmbeddingIndex, size: int, seed: int) -> EmbeddingIndex:
    return index.subset(nested_subset_ids(index, size, seed))


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


def _score_image(image: str, spec: ClassSpec, eval_embedders: dict) -> list[ScoreSample]:
    samples = []
    for metric in (METRIC_CLIP_T2I, METRIC_SIGLIP_T2I):
        embedder = eval_embedders.get(metric)
        if embedder is not None:
            samples.append(
                ScoreSample(spec.class_id, metric, text_image_score(embedder, spec.prompt, image))
            )
    dino = eval_embedders.get(METRIC_DINO_I2I)
    if dino is not None:
        for real in spec.real_images:
            samples.append(
                ScoreSample(spec.class_id, METRIC_DINO_I2I, image_image_score(dino, real, image))
            )
    return samples


def _run_variant(
    plan: ExperimentPlan,
    spec: ClassSpec,
    sample_idx: int,
    clients: PipelineClients,
    indexes: list[EmbeddingIndex],
    base_config: PipelineConfig,
) -> str:
    """Generate one image for (plan, class, sample); returns the artifact path."""
    run_id = f"{plan.name}--{spec.class_id}--s{sample_idx}"
    out_root = Path(base_config.out_dir)
    seed_a = _stable_seed(plan.name, spec.class_id, sample_idx, "initial")
    seed_b = _stable_seed(plan.name, spec.class_id, sample_idx, "final")

    if plan.variant == "base":
        result = generate(
            clients.t2i,
            spec.prompt,
            GenerationParams(seed=seed_a),
            out_stem=out_root / run_id / "final",
        )
        return result.image

    if plan.variant == "rephrased-prompt":
        initial = generate(
            clients.t2i,
            spec.prompt,
            GenerationParams(seed=seed_a),
            out_stem=out_root / run_id / "initial",
        )
        rephrased = rephrase_prompt(clients.vlm, spec.prompt, initial.image)
        result = generate(
            clients.t2i,
            rephrased,
            GenerationParams(seed=seed_b),
            out_stem=out_root / run_id / "final",
        )
        return result.image

    caption_mode = {
        "retrieve-concepts": "concepts",
        "retrieve-prompt": "prompt",
        "full-method": "captions",
    }[plan.variant]
    config = dataclasses.replace(
        base_config,
        caption_mode=caption_mode,
        rerank=plan.rerank,
        initial_seed=seed_a,
        final_seed=seed_b,
    )
    run_clients = PipelineClients(
        vlm=clients.vlm, t2i=clients.t2i, embedders=clients.embedders, indexes=indexes
    )
    trace = run(spec.prompt, config, run_clients, run_id=run_id)
    return trace.final_image


def run_grid(
    plans: list[ExperimentPlan],
    classes: list[ClassSpec],
    clients: PipelineClients,
    eval_embedders: dict[str, EmbedderClient],
    base_config: PipelineConfig,
    retrieval_sets: dict[str, list[EmbeddingIndex]] | None = None,
    samples_per_class: int = 1,
    subset_seed: int = 0,
    parallelism: int = 1,
) -> dict:
    """Run every plan over every class, score, and aggregate.

    Returns the report dict: per-(plan, class, metric) cells plus a
    per-(plan, metric) summary over all samples.  A failing cell is recorded
    with its error and the grid continues.
    """
    if not plans or not classes:
        raise ConfigError("run_grid needs at least one plan and one class")
    sizes = [p.subset_size for p in plans if p.subset_size is not None]
    if sizes != sorted(sizes):
        raise ConfigError("subset sizes must be ascending across plans")
    if retrieval_sets is None:
        retrieval_sets = {"default": clients.indexes or []}

    plan_indexes: dict[str, list[EmbeddingIndex]] = {}
    for plan in plans:
        if plan.variant in ("base", "rephrased-prompt"):
            plan_indexes[plan.name] = []
            continue
        if plan.retrieval_set not in retrieval_sets:
            raise ConfigError(f"plan {plan.name!r}: unknown retrieval set {plan.retrieval_set!r}")
        indexes = retrieval_sets[plan.retrieval_set]
        if plan.subset_size is not None:
            indexes = [nested_subset(ix, plan.subset_size, subset_seed) for ix in indexes]
        plan_indexes[plan.name] = indexes

    metrics = [m for m in METRICS if m in eval_embedders]
    tasks = [(plan, spec) for plan in plans for spec in classes]

    def run_cell(task):
        plan, spec = task
        samples: list[ScoreSample] = []
        for i in range(samples_per_class):
            image = _run_variant(plan, spec, i, clients, plan_indexes[plan.name], base_config)
            samples.extend(_score_image(image, spec, eval_embedders))
        return samples

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(lambda t: _safe(run_cell, t), tasks))
    else:
        results = [_safe(run_cell, task) for task in tasks]

    cells = []
    by_plan_metric: dict[tuple[str, str], list[ScoreSample]] = {}
    for (plan, spec), outcome in zip(tasks, results):
        if isinstance(outcome, Exception):
            cells.append({"plan": plan.name, "class_id": spec.class_id, "error": str(outcome)})
            continue
        samples = outcome
        for metric in metrics:
            metric_samples = [s for s in samples if s.metric == metric]
            if not metric_samples:
                continue
            cell = aggregate(metric_samples)
            cells.append(
                {
                    "plan": plan.name,
                    "class_id": spec.class_id,
                    "metric": metric,
                    "mean": cell.mean,
                    "sem": cell.sem,
                    "n": cell.n,
                }
            )
            by_plan_metric.setdefault((plan.name, metric), []).extend(metric_samples)

    summary = []
    for plan in plans:
        for metric in metrics:
            samples = by_plan_metric.get((plan.name, metric))
            if not samples:
                continue
            cell = aggregate(samples)
            summary.append(
                {"plan": plan.name, "metric": metric, "mean": cell.mean, "sem": cell.sem, "n": cell.n}
            )

    return {
        "plans": [dataclasses.asdict(p) for p in plans],
        "metrics": metrics,
        "classes": [c.class_id for c in classes],
        "samples_per_class": samples_per_class,
        "cells": cells,
        "summary": summary,
    }


def _safe(fn, task):
    try:
        return fn(task)
    except Exception as exc:  # recorded per-cell; the grid continues
        return exc


def dataset_size_sweep(
    index: EmbeddingIndex,
    sizes: list[int],
    classes: list[ClassSpec],
    clients: PipelineClients,
    eval_embedders: dict[str, EmbedderClient],
    base_config: PipelineConfig,
    subset_seed: int = 0,
    samples_per_class: int = 1,
) -> dict:
    """Fig-5-style harness: run the full method at each retrieval-set size.

    Sizes must be ascending; subsets are seeded and strictly nested.
    """
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigError("sweep sizes must be strictly ascending")
    plans = [
        ExperimentPlan(name=f"size-{s}", variant="full-method", retrieval_set="sweep", subset_size=s)
        for s in sizes
    ]
    report = run_grid(
        plans,
        classes,
        clients,
        eval_embedders,
        base_config,
        retrieval_sets={"sweep": [index]},
        samples_per_class=samples_per_class,
        subset_seed=subset_seed,
    )
    report["sweep_sizes"] = sizes
    return report


def report_to_csv(report: dict) -> str:
    """Summary projection: one row per plan, mean/sem columns per metric."""
    metrics = report["metrics"]
    header = ["plan"]
    for metric in metrics:
        header += [f"{metric}_mean", f"{metric}_sem"]
    lines = [",".join(header)]
    by_plan: dict[str, dict[str, tuple[float, float]]] = {}
    for entry in report["summary"]:
        by_plan.setdefault(entry["plan"], {})[entry["metric"]] = (entry["mean"], entry["sem"])
    for plan in [p["name"] for p in report["plans"]]:
        row = [plan]
        for metric in metrics:
            if metric in by_plan.get(plan, {}):
                mean, sem = by_plan[plan][metric]
                row += [f"{mean:.6f}", f"{sem:.6f}"]
            else:
                row += ["", ""]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def save_report(report: dict, path: str | Path, csv_path: str | Path | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        Path(csv_path).write_text(report_to_csv(report), encoding="utf-8")

"""Operator CLI: ingest, retrieve, generate, personalize, eval, sweep.

Stdout is JSON by default (one document per invocation) or a single plain
line with --human; diagnostics go to stderr.  Exit codes: 0 success,
1 pipeline/model failure, 2 usage or configuration error.

Remote endpoints come from the environment (IMAGERAG_VLM_ENDPOINT,
IMAGERAG_VLM_KEY, IMAGERAG_T2I_ENDPOINT, IMAGERAG_EMBED_ENDPOINT); secrets
never live in config files.  --mock-transcript routes every client to
deterministic mocks (scripted VLM transcript, hash embedders, manifest
backend), which is how the offline examples and tests run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backends import HttpT2iClient, MockT2iClient, load_profile
from .errors import ConfigError, ImageRagError, IndexFormatError
from .evalharness import (
    METRICS,
    ExperimentPlan,
    dataset_size_sweep,
    load_class_list,
    run_grid,
    save_report,
)
from .index import HashEmbedder, HttpEmbedderClient, ingest, write_index
from .pipeline import PipelineClients, PipelineConfig, run, run_personalized
from .retrieval import Bm25Params, bm25_rerank, build_pool, vlm_rerank
from .vlm import HttpVlmClient, MockVlmClient

DEFAULT_VLM_MODEL = "gpt-4o-2024-08-06"

ENV_VLM_ENDPOINT = "IMAGERAG_VLM_ENDPOINT"
ENV_VLM_KEY = "IMAGERAG_VLM_KEY"
ENV_T2I_ENDPOINT = "IMAGERAG_T2I_ENDPOINT"
ENV_EMBED_ENDPOINT = "IMAGERAG_EMBED_ENDPOINT"


def _emit(args, payload, human: str) -> None:
    if getattr(args, "human", False):
        print(human)
    else:
        print(json.dumps(payload, sort_keys=True))


def _default_meta(vectors: str, meta: str | None) -> str:
    return meta or f"{vectors}.meta.jsonl"


def cmd_ingest(args) -> int:
    index = ingest(args.vectors, _default_meta(args.vectors, args.meta))
    if args.out:
        write_index(
            args.out,
            index.ids,
            index.matrix.astype(np.float32),
            metadata_path=_default_meta(args.out, args.out_meta),
            metadata=index.metadata,
            embedder_tag=index.embedder_tag,
        )
    _emit(
        args,
        {"records": index.count, "dimension": index.dimension, "embedder_tag": index.embedder_tag},
        f"{index.count} records, dim {index.dimension}",
    )
    return 0


def _retrieval_embedder_for(index, args):
    if args.mock_transcript is not None:
        return HashEmbedder(index.dimension, tag=index.embedder_tag)
    endpoint = os.environ.get(ENV_EMBED_ENDPOINT)
    if not endpoint:
        raise ConfigError(
            f"no embedder configured: set {ENV_EMBED_ENDPOINT} or pass --mock-transcript"
        )
    return HttpEmbedderClient(endpoint, model=index.embedder_tag, tag=index.embedder_tag)


def _vlm_client(args):
    if args.mock_transcript is not None:
        return MockVlmClient.from_jsonl(args.mock_transcript)
    endpoint = os.environ.get(ENV_VLM_ENDPOINT)
    if not endpoint:
        raise ConfigError(f"no VLM configured: set {ENV_VLM_ENDPOINT} or pass --mock-transcript")
    return HttpVlmClient(
        endpoint,
        model_name=os.environ.get("IMAGERAG_VLM_MODEL", DEFAULT_VLM_MODEL),
        api_key=os.environ.get(ENV_VLM_KEY),
    )


def cmd_retrieve(args) -> int:
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    index = ingest(args.index, _default_meta(args.index, args.meta))
    embedder = _retrieval_embedder_for(index, args)
    pool = build_pool(args.caption, args.k, [(index, embedder)])
    if args.rerank == "bm25":
        if any(not c.caption for c in pool.candidates):
            raise ConfigError(
                "rerank=bm25 requires a caption for every candidate; "
                "this index's metadata has records without captions"
            )
        hits = bm25_rerank(pool, args.caption, Bm25Params())
    elif args.rerank == "vlm":
        hits = vlm_rerank(pool, args.caption, _vlm_client(args)).hits
    else:
        hits = pool.cosine_order
    payload = [{"id": h.id, "score": h.score, "metric": h.metric} for h in hits]
    _emit(args, payload, " ".join(f"{h.id}={h.score:.6f}" for h in hits))
    return 0


def _pipeline_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "backend_profile", None):
        overrides["backend_profile"] = args.backend_profile
    if getattr(args, "rerank", None):
        overrides["rerank"] = args.rerank
    if getattr(args, "skip_decision", False):
        overrides["skip_decision"] = True
    if getattr(args, "seed", None) is not None:
        overrides["initial_seed"] = args.seed
        overrides["final_seed"] = args.seed
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    if getattr(args, "index", None):
        overrides["indexes"] = [
            {"vectors": args.index, "metadata": _default_meta(args.index, args.meta)}
        ]
    return dataclasses.replace(config, **overrides) if overrides else config


def _pipeline_clients(config: PipelineConfig, args) -> PipelineClients:
    profile = load_profile(config.backend_profile)
    if not config.indexes:
        raise ConfigError("no index configured: pass --index or set indexes in the config file")
    indexes = [
        ingest(entry["vectors"], entry["metadata"], entry.get("embedder_tag"))
        for entry in config.indexes
    ]
    if args.mock_transcript is not None:
        vlm = MockVlmClient.from_jsonl(args.mock_transcript)
        t2i = MockT2iClient(profile)
        embedders = {ix.embedder_tag: HashEmbedder(ix.dimension, tag=ix.embedder_tag) for ix in indexes}
    else:
        vlm = _vlm_client(args)
        t2i_endpoint = os.environ.get(ENV_T2I_ENDPOINT)
        if not t2i_endpoint and not profile.endpoint:
            raise ConfigError(f"no T2I endpoint: set {ENV_T2I_ENDPOINT} or pass --mock-transcript")
        t2i = HttpT2iClient(profile, endpoint=t2i_endpoint)
        embed_endpoint = os.environ.get(ENV_EMBED_ENDPOINT)
        if not embed_endpoint:
            raise ConfigError(f"no embedder endpoint: set {ENV_EMBED_ENDPOINT}")
        embedders = {
            ix.embedder_tag: HttpEmbedderClient(embed_endpoint, model=ix.embedder_tag, tag=ix.embedder_tag)
            for ix in indexes
        }
    return PipelineClients(vlm=vlm, t2i=t2i, embedders=embedders, indexes=indexes)


def cmd_generate(args) -> int:
    config = _pipeline_config(args)
    clients = _pipeline_clients(config, args)
    trace = run(args.prompt, config, clients, run_id=args.run_id)
    payload = {
        "run_id": trace["run_id"],
        "final": trace.final_image,
        "trace": str(trace.path),
        "stages": trace.stages,
    }
    _emit(args, payload, f"{trace['run_id']} -> {trace.final_image}")
    return 0


def cmd_personalize(args) -> int:
    config = _pipeline_config(args)
    clients = _pipeline_clients(config, args)
    trace = run_personalized(args.prompt, args.subject, config, clients, run_id=args.run_id)
    payload = {
        "run_id": trace["run_id"],
        "final": trace.final_image,
        "trace": str(trace.path),
        "stages": trace.stages,
    }
    _emit(args, payload, f"{trace['run_id']} -> {trace.final_image}")
    return 0


def _eval_embedders(args, spec: dict | None):
    if args.mock_transcript is not None:
        return {m: HashEmbedder(16, tag=f"eval-{m}") for m in METRICS}
    endpoint = os.environ.get(ENV_EMBED_ENDPOINT)
    if not endpoint:
        raise ConfigError(f"no embedder endpoint: set {ENV_EMBED_ENDPOINT} or pass --mock-transcript")
    spec = spec or {m: f"eval-{m}" for m in METRICS}
    return {
        metric: HttpEmbedderClient(endpoint, model=model, tag=model)
        for metric, model in spec.items()
    }


def cmd_eval(args) -> int:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    plans = [ExperimentPlan(**p) for p in raw["plans"]]
    classes = load_class_list(raw["classes"])
    pipeline_raw = dict(raw.get("pipeline", {}))
    if args.out_dir:
        pipeline_raw["out_dir"] = args.out_dir
    config = PipelineConfig(**pipeline_raw)
    clients = _pipeline_clients(config, args)
    report = run_grid(
        plans,
        classes,
        clients,
        _eval_embedders(args, raw.get("eval_embedders")),
        config,
        retrieval_sets={"default": clients.indexes},
        samples_per_class=raw.get("samples_per_class", 1),
        subset_seed=raw.get("subset_seed", 0),
        parallelism=raw.get("parallelism", 1),
    )
    out = raw.get("out", "report.json")
    save_report(report, out, csv_path=raw.get("csv"))
    _emit(
        args,
        {"report": out, "cells": len(report["cells"]), "plans": len(plans)},
        f"wrote {out}: {len(report['cells'])} cells",
    )
    return 0


def cmd_sweep(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    config = _pipeline_config(args)
    clients = _pipeline_clients(config, args)
    classes = load_class_list(args.classes)
    report = dataset_size_sweep(
        clients.indexes[0],
        sizes,
        classes,
        clients,
        _eval_embedders(args, None),
        config,
        subset_seed=args.seed or 0,
    )
    save_report(report, args.out)
    _emit(
        args,
        {"report": args.out, "sizes": sizes, "cells": len(report["cells"])},
        f"wrote {args.out}: sizes {sizes}",
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imagerag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_pipeline=True):
        p.add_argument("--human", action="store_true", help="plain-line output instead of JSON")
        p.add_argument("--mock-transcript", help="VLM transcript JSONL; routes all clients to mocks")
        if with_pipeline:
            p.add_argument("--config", help="pipeline config JSON")
            p.add_argument("--index", help="index vectors file")
            p.add_argument("--meta", help="metadata sidecar (default: <index>.meta.jsonl)")
            p.add_argument("--backend-profile", help="backend profile name or JSON path")
            p.add_argument("--rerank", choices=["none", "bm25", "vlm"])
            p.add_argument("--skip-decision", action="store_true")
            p.add_argument("--seed", type=int)
            p.add_argument("--out-dir", help="run directory root")
            p.add_argument("--run-id")

    p = sub.add_parser("ingest", help="validate (and optionally rewrite) an index export")
    p.add_argument("vectors")
    p.add_argument("--meta")
    p.add_argument("--out", help="write a validated, normalized copy here")
    p.add_argument("--out-meta")
    p.add_argument("--human", action="store_true")
    p.set_defaults(func=cmd_ingest, mock_transcript=None)

    p = sub.add_parser("retrieve", help="top-k retrieval for a caption")
    p.add_argument("caption")
    p.add_argument("--index", required=True)
    p.add_argument("--meta")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--rerank", choices=["none", "bm25", "vlm"], default="none")
    p.add_argument("--human", action="store_true")
    p.add_argument("--mock-transcript")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("generate", help="run the full pipeline for a prompt")
    p.add_argument("prompt")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("personalize", help="pipeline run with a personal subject image")
    p.add_argument("prompt")
    p.add_argument("--subject", required=True, help="subject image (kept as first attachment)")
    common(p)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("eval", help="run an experiment grid from a grid config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--human", action="store_true")
    p.add_argument("--mock-transcript")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="retrieval dataset-size sweep")
    p.add_argument("--sizes", required=True, help="comma-separated ascending sizes")
    p.add_argument("--classes", required=True, help="class list JSONL")
    p.add_argument("--out", default="sweep-report.json")
    common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IndexFormatError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ImageRagError as exc:  # pipeline/model failures, incl. PipelineError
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""CLI: export-images / export-texts into the index binary format.

Exit codes: 0 success, 1 model load failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import ExportError, ModelLoadError
from .jobs import ExportJob, export_images, export_texts
from .models import available_models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("export-images", "embed every image under a directory"),
        ("export-texts", "embed a JSONL caption list ({id, caption} per line)"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("input")
        p.add_argument("--model", required=True, help=f"one of: {', '.join(available_models())}")
        p.add_argument("--out", required=True, help="vectors output path")
        p.add_argument("--meta-out", help="metadata sidecar path (default: <out>.meta.jsonl)")
        p.add_argument("--batch-size", type=int, default=32)
        p.set_defaults(command=name)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        input_path=args.input,
        model_tag=args.model,
        out=args.out,
        meta_out=args.meta_out,
        batch_size=args.batch_size,
    )
    try:
        runner = export_images if args.command == "export-images" else export_texts
        summary = runner(job)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ExportError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

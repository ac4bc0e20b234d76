#!/usr/bin/env python3
"""Build a seeded synthetic index export (binary vectors + metadata sidecar).

Used to (re)generate tests/fixtures/index/tiny.irag and for ad-hoc
experiments with the CLI at larger sizes:

    python3 scripts/make_synthetic_index.py --count 10000 --dim 64 --out /tmp/syn.irag
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from imagerag.index import write_index  # noqa: E402

WORDS = ["sheep", "cab", "lake", "painting", "bird", "chime", "gown", "cradle"]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--count", type=int, default=8)
    parser.add_argument("--dim", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tag", default="mock-clip")
    parser.add_argument("--out", default="tests/fixtures/index/tiny.irag")
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    ids = [f"syn-{i:05d}" for i in range(args.count)]
    vectors = rng.standard_normal((args.count, args.dim)).astype(np.float32)
    metadata = {
        rid: {
            "uri": f"db://{rid}",
            "caption": f"a photo of a {WORDS[i % len(WORDS)]} number {i}",
        }
        for i, rid in enumerate(ids)
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_index(
        out,
        ids,
        vectors,
        metadata_path=f"{out}.meta.jsonl",
        metadata=metadata,
        embedder_tag=args.tag,
    )
    print(f"wrote {out} ({args.count} records, dim {args.dim}, tag {args.tag})")


if __name__ == "__main__":
    main()

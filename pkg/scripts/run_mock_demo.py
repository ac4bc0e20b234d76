#!/usr/bin/env python3
"""End-to-end demo on deterministic mocks: no services, no downloads.

Builds a tiny index, scripts a VLM transcript in which the judge rejects the
initial image and names two missing concepts, then runs the full pipeline and
prints where the trace and artifacts landed.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from imagerag.cli import main  # noqa: E402
from imagerag.index import write_index  # noqa: E402
import numpy as np  # noqa: E402


def build_world(root: Path):
    vectors = np.array(
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
        dtype=np.float32,
    )
    ids = ["ref-sheep", "ref-paint", "ref-cab"]
    metadata = {
        "ref-sheep": {"uri": "db://ref-sheep", "caption": "a white sheep in a field"},
        "ref-paint": {"uri": "db://ref-paint", "caption": "an oil painting close-up"},
        "ref-cab": {"uri": "db://ref-cab", "caption": "a yellow cab"},
    }
    write_index(
        root / "demo.irag",
        ids,
        vectors,
        metadata_path=root / "demo.irag.meta.jsonl",
        metadata=metadata,
        embedder_tag="mock-clip",
    )
    transcript = [
        {"content": "no"},
        {"content": "a sheep\noil painting style"},
        {"content": "A fluffy white sheep in a meadow\nAn oil painting with heavy brushstrokes"},
    ]
    (root / "transcript.jsonl").write_text(
        "\n".join(json.dumps(t) for t in transcript) + "\n"
    )


def run_demo():
    root = Path(tempfile.mkdtemp(prefix="imagerag-demo-"))
    build_world(root)
    code = main(
        [
            "generate",
            "an oil painting of a sheep",
            "--index", str(root / "demo.irag"),
            "--mock-transcript", str(root / "transcript.jsonl"),
            "--out-dir", str(root / "runs"),
            "--run-id", "demo",
            "--seed", "0",
        ]
    )
    print(f"exit code {code}; artifacts under {root}/runs/demo", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(run_demo())

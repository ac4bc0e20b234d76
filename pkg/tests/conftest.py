import numpy as np
import pytest

from imagerag.backends import MockT2iClient, load_profile


@pytest.fixture(autouse=True)
def _no_ambient_endpoints(monkeypatch):
    # Tests must never pick up real endpoints from the environment.
    for var in ("IMAGERAG_VLM_ENDPOINT", "IMAGERAG_VLM_KEY",
                "IMAGERAG_T2I_ENDPOINT", "IMAGERAG_EMBED_ENDPOINT"):
        monkeypatch.delenv(var, raising=False)

from imagerag.index import EmbeddingIndex, MappingEmbedder
from imagerag.pipeline import PipelineClients, PipelineConfig
from imagerag.vlm import MockVlmClient

SHEEP = [1.0, 0.0, 0.0, 0.0]
PAINT = [0.0, 1.0, 0.0, 0.0]
CAB = [0.0, 0.0, 1.0, 0.0]
LAKE = [0.0, 0.0, 0.0, 1.0]

CAPTION_VECTORS = {
    "A fluffy white sheep standing in a meadow": SHEEP,
    "An oil painting with thick visible brushstrokes": PAINT,
    "a sheep": SHEEP,
    "oil painting style": PAINT,
    "a Geococcyx": CAB,
    "a quiet mountain lake": LAKE,
}


def build_toy_index(tag="mock-clip"):
    records = [
        ("ref-cab", CAB, "a yellow taxi cab on a street"),
        ("ref-lake", LAKE, "a quiet lake between mountains"),
        ("ref-paint", PAINT, "an oil painting with heavy brushstrokes"),
        ("ref-sheep", SHEEP, "a white sheep grazing in a field"),
        ("ref-sheep2", [0.9, 0.1, 0.0, 0.0], "a second sheep on a hill"),
    ]
    ids = [rid for rid, _, _ in records]
    matrix = np.array([vec for _, vec, _ in records], dtype=np.float64)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
    metadata = {rid: {"uri": f"db://{rid}", "caption": cap} for rid, _, cap in records}
    return EmbeddingIndex(dimension=4, ids=ids, matrix=matrix, metadata=metadata, embedder_tag=tag)


def make_embedder(tag="mock-clip", extra_texts=None):
    texts = dict(CAPTION_VECTORS)
    texts.update(extra_texts or {})
    return MappingEmbedder(dim=4, tag=tag, texts=texts)


@pytest.fixture
def toy_index():
    return build_toy_index()


@pytest.fixture
def pipeline_setup(tmp_path, toy_index):
    """(config, clients_factory): clients_factory takes the scripted VLM responses."""
    config = PipelineConfig(
        backend_profile="omnigen",
        out_dir=str(tmp_path / "runs"),
        initial_seed=11,
        final_seed=12,
    )

    def factory(vlm_responses, extra_texts=None):
        return PipelineClients(
            vlm=MockVlmClient(list(vlm_responses)),
            t2i=MockT2iClient(load_profile("omnigen")),
            embedders={"mock-clip": make_embedder(extra_texts=extra_texts)},
            indexes=[toy_index],
        )

    return config, factory


TWO_CONCEPT_RESPONSES = [
    "no",
    "a sheep\noil painting style",
    "A fluffy white sheep standing in a meadow\nAn oil painting with thick visible brushstrokes",
]

"""ImageRAG engine: retrieval-augmented generation for text-to-image backends.

Given a prompt, generate an initial image, ask a VLM whether it matches,
derive retrieval captions for whatever is missing, retrieve reference images
from an embedding index, and regenerate with the references in context.
"""

from .backends import (
    AugmentedPrompt,
    BackendCapabilities,
    BackendProfile,
    GenerationParams,
    GenerationResult,
    HttpT2iClient,
    MockT2iClient,
    generate,
    load_profile,
    render_personalized,
    render_template,
)
from .errors import (
    CapabilityError,
    ConfigError,
    ImageRagError,
    IndexFormatError,
    PipelineError,
    TransportError,
    VlmProtocolError,
    VlmRefusalError,
)
from .evalharness import (
    AggregateCell,
    ClassSpec,
    ExperimentPlan,
    ScoreSample,
    aggregate,
    dataset_size_sweep,
    image_image_score,
    nested_subset,
    run_grid,
    text_image_score,
)
from .index import (
    EmbeddingIndex,
    EmbeddingRecord,
    HashEmbedder,
    HttpEmbedderClient,
    MappingEmbedder,
    RetrievalHit,
    embed_image,
    embed_text,
    ingest,
    top_k,
    write_index,
)
from .pipeline import PipelineClients, PipelineConfig, PipelineTrace, run, run_personalized
from .retrieval import Bm25Params, CandidatePool, bm25_rerank, build_pool, vlm_rerank
from .vlm import (
    ConceptCaption,
    HttpVlmClient,
    MatchDecision,
    MockVlmClient,
    RetryPolicy,
    captions_for_concepts,
    decide_match,
    missing_concepts,
    rephrase_prompt,
    retrieval_caption_generation,
)

__version__ = "0.1.0"

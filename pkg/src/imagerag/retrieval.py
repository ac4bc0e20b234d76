"""Candidate pools and re-ranking: retrieve-then-re-rank over the index.

A pool is the deduplicated union of per-source cosine top-k hits (one source
per embedding space, e.g. CLIP and SigLIP).  Raw scores from different spaces
are never compared against each other; the pool order is only a starting
point and re-rankers produce the order that matters.

BM25 is Okapi with IDF = ln(1 + (N - df + 0.5)/(df + 0.5)), k1=1.2, b=0.75,
over lowercased tokens split on non-alphanumeric runs (no stemming, no
stopwords).  The VLM re-ranker sends a single chat request listing numbered
candidate captions and parses a comma-separated ranking of indices; anything
it fails to rank falls back to the pool's cosine order.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError, TransportError
from .index import (
    METRIC_BM25,
    METRIC_VLM_RERANK,
    EmbeddingIndex,
    EmbedderClient,
    RetrievalHit,
    embed_text,
    top_k,
)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ConfigError("BM25 k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError("BM25 b must be in [0, 1]")


@dataclass
class Candidate:
    hit: RetrievalHit
    caption: str


@dataclass
class CandidatePool:
    """Deduplicated retrieval candidates for one query caption.

    Candidates are ordered by best cosine score descending (id ascending on
    ties); `provenance` records which metrics contributed hits.
    """

    query_caption: str
    candidates: list[Candidate]
    provenance: set[str] = field(default_factory=set)

    @property
    def cosine_order(self) -> list[RetrievalHit]:
        return [c.hit for c in self.candidates]


def build_pool(
    caption: str,
    per_source_k: int,
    sources: Sequence[tuple[EmbeddingIndex, EmbedderClient]],
) -> CandidatePool:
    """Union of each source's top `per_source_k` hits, deduplicated by id.

    Dedup keeps the best score seen for an id (and the metric that produced
    it); captions come from index metadata and may be empty.
    """
    if not sources:
        raise ConfigError("build_pool requires at least one (index, embedder) source")
    if per_source_k < 1:
        raise ConfigError("per_source_k must be >= 1")

    best: dict[str, RetrievalHit] = {}
    captions: dict[str, str] = {}
    provenance: set[str] = set()
    for index, embedder in sources:
        if index.count == 0:
            raise ConfigError("build_pool: empty index")
        query = embed_text(embedder, caption, expect_dim=index.dimension)
        hits = top_k(index, query, per_source_k)
        provenance.update(h.metric for h in hits)
        for hit in hits:
            prev = best.get(hit.id)
            if prev is None or hit.score > prev.score:
                best[hit.id] = hit
            captions.setdefault(hit.id, index.caption_of(hit.id) or "")

    ordered = sorted(best.values(), key=lambda h: (-h.score, h.id))
    return CandidatePool(
        query_caption=caption,
        candidates=[Candidate(hit=h, caption=captions[h.id]) for h in ordered],
        provenance=provenance,
    )


def bm25_scores(
    query_tokens: Sequence[str],
    doc_tokens: Sequence[Sequence[str]],
    params: Bm25Params,
) -> list[float]:
    n_docs = len(doc_tokens)
    if n_docs == 0:
        return []
    avgdl = sum(len(d) for d in doc_tokens) / n_docs
    df: dict[str, int] = {}
    for term in set(query_tokens):
        df[term] = sum(1 for d in doc_tokens if term in d)
    scores = []
    for doc in doc_tokens:
        score = 0.0
        length_norm = params.k1 * (1.0 - params.b + params.b * len(doc) / avgdl) if avgdl > 0 else params.k1
        for term in query_tokens:
            tf = doc.count(term)
            if tf == 0:
                continue
            idf = math.log(1.0 + (n_docs - df[term] + 0.5) / (df[term] + 0.5))
            score += idf * tf * (params.k1 + 1.0) / (tf + length_norm)
        scores.append(score)
    return scores


def bm25_rerank(
    pool: CandidatePool,
    query: str,
    params: Bm25Params = Bm25Params(),
) -> list[RetrievalHit]:
    """Re-rank the pool by BM25 over candidate captions.

    Order: BM25 descending, then prior cosine score descending, then id
    ascending.  Every candidate must carry a caption.
    """
    if not query:
        raise ValueError("query must be non-empty")
    for cand in pool.candidates:
        if not cand.caption:
            raise ValueError(f"candidate {cand.hit.id!r} has no caption for BM25 re-ranking")

    query_tokens = tokenize(query)
    doc_tokens = [tokenize(c.caption) for c in pool.candidates]
    scores = bm25_scores(query_tokens, doc_tokens, params)
    order = sorted(
        range(len(pool.candidates)),
        key=lambda i: (-scores[i], -pool.candidates[i].hit.score, pool.candidates[i].hit.id),
    )
    return [
        RetrievalHit(id=pool.candidates[i].hit.id, score=scores[i], metric=METRIC_BM25)
        for i in order
    ]


_RERANK_PROMPT = (
    'Rank the following candidate images for the query "{query}".\n'
    "Each candidate is given as a numbered caption:\n"
    "{candidates}\n"
    "Answer with a comma-separated list of candidate numbers, best match first, "
    "and nothing else."
)


def vlm_rerank_prompt(pool: CandidatePool, query: str) -> str:
    lines = "\n".join(f"{i + 1}. {c.caption}" for i, c in enumerate(pool.candidates))
    return _RERANK_PROMPT.format(query=query, candidates=lines)


@dataclass
class VlmRerankResult:
    hits: list[RetrievalHit]
    fallback: bool = False
    raw_response: str | None = None


def vlm_rerank(pool: CandidatePool, query: str, vlm) -> VlmRerankResult:
    """Re-rank via one VLM chat request over numbered candidate captions.

    Parsed positions come first in the VLM's order; unranked candidates follow
    in cosine order.  A transport failure or a fully unparseable answer falls
    back to cosine order with `fallback` set.
    """
    if not pool.candidates:
        return VlmRerankResult(hits=[], fallback=False, raw_response=None)
    prompt = vlm_rerank_prompt(pool, query)
    try:
        response = vlm.chat([{"role": "user", "content": prompt}], temperature=0.0)
    except TransportError:
        return VlmRerankResult(hits=_as_rerank_hits(pool.cosine_order), fallback=True)

    n = len(pool.candidates)
    ranked: list[int] = []
    for token in re.findall(r"\d+", response):
        pos = int(token)
        if 1 <= pos <= n and (pos - 1) not in ranked:
            ranked.append(pos - 1)
    if not ranked:
        return VlmRerankResult(hits=_as_rerank_hits(pool.cosine_order), fallback=True, raw_response=response)
    remainder = [i for i in range(n) if i not in ranked]
    order = ranked + remainder
    return VlmRerankResult(
        hits=_as_rerank_hits([pool.candidates[i].hit for i in order]),
        fallback=False,
        raw_response=response,
    )


def _as_rerank_hits(hits: Sequence[RetrievalHit]) -> list[RetrievalHit]:
    # Score carries the candidate's prior cosine score; the order is authoritative.
    return [RetrievalHit(id=h.id, score=h.score, metric=METRIC_VLM_RERANK) for h in hits]

import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imagerag.errors import TransportError
from imagerag.index import EmbeddingIndex, MappingEmbedder, RetrievalHit
from imagerag.retrieval import (
    Candidate,
    CandidatePool,
    bm25_rerank,
    build_pool,
    tokenize,
    vlm_rerank,
)


def oracle_bm25(query, docs, k1=1.2, b=0.75):
    """Hand oracle: direct transcription of the Okapi formula with
    IDF = ln(1 + (N - df + 0.5)/(df + 0.5))."""

    def toks(s):
        return [t for t in re.split(r"[^0-9a-z]+", s.lower()) if t]

    doc_tokens = [toks(d) for d in docs]
    n = len(docs)
    avgdl = sum(len(t) for t in doc_tokens) / n
    out = []
    for dt in doc_tokens:
        score = 0.0
        for term in toks(query):
            df = sum(1 for other in doc_tokens if term in other)
            tf = dt.count(term)
            if tf == 0:
                continue
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(dt) / avgdl))
        out.append(score)
    return out


TOY_DOCS = [
    "a red bird in the red barn",
    "a blue car parked outside",
    "the red bird sings at dawn",
    "green trees and a quiet lake",
    "red paint on an old car",
]
TOY_QUERY = "red bird car"
# Frozen output of oracle_bm25(TOY_QUERY, TOY_DOCS) with k1=1.2, b=0.75.
TOY_EXPECTED = [
    1.5275234565734175,
    0.9395274254529659,
    1.414465238086587,
    0.0,
    1.414465238086587,
]


def make_pool(captions, scores=None, query="q"):
    scores = scores or [1.0 - 0.01 * i for i in range(len(captions))]
    cands = [
        Candidate(hit=RetrievalHit(id=f"c{i}", score=s, metric="cosine-clip-space"), caption=cap)
        for i, (cap, s) in enumerate(zip(captions, scores))
    ]
    return CandidatePool(query_caption=query, candidates=cands, provenance={"cosine-clip-space"})


class ScriptedVlm:
    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def chat(self, messages, temperature=0.0):
        self.requests.append({"messages": messages, "temperature": temperature})
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class TestBm25:
    def test_toy_corpus_matches_frozen_oracle(self):
        pool = make_pool(TOY_DOCS)
        hits = bm25_rerank(pool, TOY_QUERY)
        live = oracle_bm25(TOY_QUERY, TOY_DOCS)
        assert all(abs(f - l) < 1e-12 for f, l in zip(TOY_EXPECTED, live))
        by_id = {h.id: h.score for h in hits}
        for i, expected in enumerate(TOY_EXPECTED):
            assert abs(by_id[f"c{i}"] - expected) < 1e-9
        # c2 and c4 tie on BM25 exactly; prior cosine (c2 higher) breaks it.
        assert [h.id for h in hits] == ["c0", "c2", "c4", "c1", "c3"]
        assert all(h.metric == "bm25" for h in hits)

    def test_disjoint_vocabulary(self):
        pool = make_pool(["a red bird", "a blue car"])
        hits = bm25_rerank(pool, "red bird")
        assert hits[0].id == "c0"
        assert hits[0].score > 0 and hits[1].score == 0.0

    def test_no_overlap_falls_back_to_cosine_order(self):
        pool = make_pool(["dog", "cat", "fish"], scores=[0.2, 0.9, 0.5])
        hits = bm25_rerank(pool, "zebra stripes")
        assert all(h.score == 0.0 for h in hits)
        assert [h.id for h in hits] == ["c1", "c2", "c0"]

    def test_missing_caption_rejected(self):
        pool = make_pool(["a bird", ""])
        with pytest.raises(ValueError, match="caption"):
            bm25_rerank(pool, "bird")

    def test_empty_query_rejected(self):
        with pytest.raises(ValueError):
            bm25_rerank(make_pool(["a"]), "")

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.text(alphabet="abcd ", min_size=1, max_size=20), min_size=1, max_size=8),
        st.text(alphabet="abcd ", min_size=1, max_size=10),
    )
    def test_property_permutation(self, captions, query):
        captions = [c if c.strip() else "pad" for c in captions]
        if not tokenize(query):
            query = "a"
        pool = make_pool(captions)
        hits = bm25_rerank(pool, query)
        assert sorted(h.id for h in hits) == sorted(c.hit.id for c in pool.candidates)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.text(alphabet="abc ", min_size=1, max_size=15), min_size=2, max_size=6),
        st.text(alphabet="abc ", min_size=1, max_size=8),
    )
    def test_property_matches_oracle(self, captions, query):
        captions = [c if c.strip() else "pad" for c in captions]
        if not tokenize(query):
            query = "a"
        pool = make_pool(captions)
        by_id = {h.id: h.score for h in bm25_rerank(pool, query)}
        for i, score in enumerate(oracle_bm25(query, captions)):
            assert abs(by_id[f"c{i}"] - score) < 1e-9

    def test_unrelated_candidate_scores_zero_and_sorts_last(self):
        pool = make_pool(["red bird", "red barn"], scores=[0.9, 0.8])
        base = [h.id for h in bm25_rerank(pool, "red bird")]
        widened = make_pool(["red bird", "red barn", "zzz qqq"], scores=[0.9, 0.8, 0.7])
        wide = bm25_rerank(widened, "red bird")
        assert wide[-1].id == "c2" and wide[-1].score == 0.0
        assert [h.id for h in wide if h.id in base] == base

    @pytest.mark.xfail(
        strict=True,
        reason="corpus-dependent IDF and avgdl make exact rank stability under "
        "zero-overlap padding unattainable for Okapi BM25; kept as documentation",
    )
    def test_unrelated_candidate_never_reorders_scored_candidates(self):
        docs = ["red red sky oak", "bird red bird", "sky fox car bird bird fox"]
        query = "red sky car"
        base = [h.id for h in bm25_rerank(make_pool(docs), query)]
        widened = make_pool(docs + ["qqq zzz zzz www qqq"])
        wide = [h.id for h in bm25_rerank(widened, query)]
        assert [i for i in wide if i in base] == base


class TestBuildPool:
    def _source(self, vectors, ids, caption_map, text_vec, tag="clip-x"):
        ids = list(ids)
        matrix = np.asarray(vectors, dtype=np.float64)
        matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
        meta = {rid: {"uri": f"db://{rid}", "caption": caption_map.get(rid, "")} for rid in ids}
        index = EmbeddingIndex(dimension=matrix.shape[1], ids=ids, matrix=matrix, metadata=meta, embedder_tag=tag)
        embedder = MappingEmbedder(dim=matrix.shape[1], tag=tag, texts={"q": text_vec})
        return index, embedder

    def test_single_source_identity(self):
        src = self._source(np.eye(4), ["a", "b", "c", "d"], {}, [1.0, 0.0, 0.0, 0.0])
        pool = build_pool("q", 3, [src])
        assert len(pool.candidates) == 3
        assert pool.candidates[0].hit.id == "a"
        assert pool.provenance == {"cosine-clip-space"}

    def test_two_source_union(self):
        ids = ["a", "b", "c", "d"]
        vecs = np.array([[1, 0, 0, 0], [0.9, 0.1, 0, 0], [0.8, 0.2, 0, 0], [0, 0, 1, 0]], dtype=float)
        s1 = self._source(vecs, ids, {}, [1.0, 0.0, 0.0, 0.0], tag="clip-x")
        # Second space ranks d, b, c highest.
        vecs2 = np.array([[1, 0, 0, 0], [0, 0, 0.2, 0.8], [0, 0, 0.4, 0.6], [0, 0, 0, 1]], dtype=float)
        s2 = self._source(vecs2, ids, {}, [0.0, 0.0, 0.0, 1.0], tag="siglip-x")
        pool = build_pool("q", 3, [s1, s2])
        assert {c.hit.id for c in pool.candidates} == {"a", "b", "c", "d"}
        assert len(pool.candidates) == 4
        assert pool.provenance == {"cosine-clip-space", "cosine-siglip-space"}

    def test_union_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        ids = [f"r{i}" for i in range(30)]
        vecs1 = rng.standard_normal((30, 8))
        vecs2 = rng.standard_normal((30, 8))
        q1, q2 = rng.standard_normal(8), rng.standard_normal(8)
        s1 = self._source(vecs1, ids, {}, (q1 / np.linalg.norm(q1)).tolist(), tag="clip-x")
        s2 = self._source(vecs2, ids, {}, (q2 / np.linalg.norm(q2)).tolist(), tag="siglip-x")
        pool = build_pool("q", 3, [s1, s2])

        def oracle_top(vectors, query):
            m = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
            qq = np.asarray(query) / np.linalg.norm(query)
            scored = sorted(zip(m @ qq, ids), key=lambda t: (-t[0], t[1]))
            return [rid for _, rid in scored[:3]]

        expected = set(oracle_top(vecs1, q1)) | set(oracle_top(vecs2, q2))
        assert {c.hit.id for c in pool.candidates} == expected

    def test_captions_carried_from_metadata(self):
        src = self._source(np.eye(2), ["a", "b"], {"a": "a red bird"}, [1.0, 0.0])
        pool = build_pool("q", 2, [src])
        assert pool.candidates[0].caption == "a red bird"


class TestVlmRerank:
    def test_scripted_reversal(self):
        pool = make_pool(["one", "two", "three"])
        out = vlm_rerank(pool, "q", ScriptedVlm(["3, 2, 1"]))
        assert [h.id for h in out.hits] == ["c2", "c1", "c0"]
        assert not out.fallback
        assert all(h.metric == "vlm-rerank" for h in out.hits)

    def test_garbage_preserves_cosine_order(self):
        pool = make_pool(["one", "two", "three"])
        out = vlm_rerank(pool, "q", ScriptedVlm(["no idea, sorry!"]))
        assert [h.id for h in out.hits] == ["c0", "c1", "c2"]
        assert out.fallback

    def test_partial_ranking_merges_with_cosine_order(self):
        pool = make_pool(["one", "two", "three", "four"])
        out = vlm_rerank(pool, "q", ScriptedVlm(["4, 2"]))
        assert [h.id for h in out.hits] == ["c3", "c1", "c0", "c2"]
        assert not out.fallback

    def test_all_partial_cases_match_merge_rule(self):
        # Enumerate every subset/permutation of ranked positions for n=3.
        from itertools import permutations

        pool = make_pool(["one", "two", "three"])
        for r in range(4):
            for perm in permutations(range(1, 4), r):
                response = ", ".join(str(p) for p in perm)
                out = vlm_rerank(pool, "q", ScriptedVlm([response or "nothing"]))
                ranked = [f"c{p - 1}" for p in perm]
                remainder = [f"c{i}" for i in range(3) if f"c{i}" not in ranked]
                expected = (ranked + remainder) if perm else ["c0", "c1", "c2"]
                assert [h.id for h in out.hits] == expected

    def test_out_of_range_and_duplicate_indices_ignored(self):
        pool = make_pool(["one", "two"])
        out = vlm_rerank(pool, "q", ScriptedVlm(["2, 9, 2, 1"]))
        assert [h.id for h in out.hits] == ["c1", "c0"]

    def test_transport_failure_falls_back_with_flag(self):
        pool = make_pool(["one", "two"])
        out = vlm_rerank(pool, "q", ScriptedVlm([TransportError("down")]))
        assert [h.id for h in out.hits] == ["c0", "c1"]
        assert out.fallback

    def test_request_lists_numbered_captions(self):
        pool = make_pool(["alpha", "beta"])
        vlm = ScriptedVlm(["1, 2"])
        vlm_rerank(pool, "find alpha", vlm)
        sent = vlm.requests[0]["messages"][0]["content"]
        assert "1. alpha" in sent and "2. beta" in sent
        assert '"find alpha"' in sent

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.lists(st.integers(1, 6), max_size=8))
    def test_property_permutation(self, n, indices):
        pool = make_pool([f"cap {i}" for i in range(n)])
        response = ", ".join(str(i) for i in indices) or "x"
        out = vlm_rerank(pool, "q", ScriptedVlm([response]))
        assert sorted(h.id for h in out.hits) == sorted(c.hit.id for c in pool.candidates)

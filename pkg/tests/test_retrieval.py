from __future__ import annotations

import math
import random

import numpy as np
import pytest

from promptner.corpus import LabeledSentence, Token
from promptner.errors import EmbeddingProviderError, IndexBuildError, ScoringError
from promptner.retrieval import (
    FALLBACK_DIM,
    DenseVector,
    EngineKind,
    FallbackEmbedder,
    Index,
    TokenMatrix,
    build_index,
    embed_query,
    fallback_embed,
    load_index,
    maxsim,
    retrieve,
    save_index,
    score,
    tfidf_weight,
)

VOCAB = ["withdrawal", "rehab", "jail", "codeine", "pain", "clean", "detox",
         "streets", "lost", "charged", "the", "a", "was", "feeling", "daily"]


def sentence(texts, sid):
    return LabeledSentence(
        id=sid,
        tokens=tuple(Token(t, i) for i, t in enumerate(texts)),
        labels=tuple("O" for _ in texts),
    )


def random_corpus(rng, n_docs, min_len=2, max_len=8):
    return [sentence([rng.choice(VOCAB) for _ in range(rng.randint(min_len, max_len))],
                     sid=f"doc-{i:03d}")
            for i in range(n_docs)]


def brute_tfidf_scores(train, query_texts):
    """Independent recomputation of the stated formula with string-keyed dicts."""
    docs = {s.id: [t.lower() for t in s.texts] for s in train}
    n_docs = len(docs)
    df: dict[str, int] = {}
    for terms in docs.values():
        for term in set(terms):
            df[term] = df.get(term, 0) + 1

    def vectorize(terms):
        weights = {}
        for term in terms:
            if term in df:
                tc = terms.count(term)
                weights[term] = tc * (math.log((1 + n_docs) / (1 + df[term])) + 1.0)
        norm = math.sqrt(sum(w * w for w in weights.values()))
        return {t: w / norm for t, w in weights.items()} if norm else {}

    qv = vectorize([t.lower() for t in query_texts])
    out = {}
    for sid, terms in docs.items():
        dv = vectorize(terms)
        out[sid] = sum(w * dv.get(t, 0.0) for t, w in qv.items())
    return out


def brute_rank(scores, n):
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [sid for sid, _ in ordered[:n]]


class TestTfidfWeight:
    def test_ubiquitous_term_weight_is_one(self):
        assert tfidf_weight(1, 7, 7) == pytest.approx(1.0, abs=1e-12)

    def test_hand_arithmetic(self):
        assert tfidf_weight(2, 1, 3) == pytest.approx(3.386294361119891, abs=1e-9)

    @pytest.mark.parametrize("tc,df,n", [(0, 1, 1), (1, 0, 1), (1, 3, 2), (-1, 1, 1)])
    def test_domain_violations(self, tc, df, n):
        with pytest.raises(ValueError):
            tfidf_weight(tc, df, n)


class TestBuildIndex:
    def test_tfidf_vocabulary_is_union_of_lowercased_tokens(self):
        train = [sentence(["Jail", "pain"], "a"), sentence(["jail"], "b"),
                 sentence(["codeine"], "c")]
        idx = build_index(train, EngineKind.TFIDF)
        assert set(idx.vocabulary) == {"jail", "pain", "codeine"}
        assert len(idx.sparse) == 3

    def test_dense_fallback_unit_norm_dim_256(self):
        train = random_corpus(random.Random(0), 3)
        idx = build_index(train, EngineKind.DENSE, embedder=FallbackEmbedder())
        for v in idx.dense.values():
            assert v.dim == 256
            assert np.linalg.norm(v.values) == pytest.approx(1.0, abs=1e-9)

    def test_late_interaction_one_row_per_token(self):
        train = [sentence(["a", "b", "c", "d", "e"], "s")]
        idx = build_index(train, EngineKind.LATE_INTERACTION, embedder=FallbackEmbedder())
        assert idx.matrices["s"].rows.shape == (5, FALLBACK_DIM)

    def test_empty_train_rejected(self):
        with pytest.raises(IndexBuildError):
            build_index([], EngineKind.TFIDF)

    def test_missing_embedder_rejected(self):
        with pytest.raises(IndexBuildError):
            build_index([sentence(["x"], "s")], EngineKind.DENSE)

    def test_embedder_failure_carries_sentence_id(self):
        class Broken:
            dim = 4

            def embed(self, texts, granularity="sentence", role="symmetric"):
                raise RuntimeError("boom")

        with pytest.raises(EmbeddingProviderError, match="doc-000"):
            build_index(random_corpus(random.Random(1), 2), EngineKind.DENSE,
                        embedder=Broken())


class TestScore:
    def test_identical_unit_vectors_dense(self):
        v = fallback_embed(["withdrawal"], "sentence")
        assert score(v, v, EngineKind.DENSE) == pytest.approx(1.0, abs=1e-9)

    def test_identical_token_matrix_scores_q(self):
        m = fallback_embed(["a", "b", "c"], "token")
        assert score(m, m, EngineKind.LATE_INTERACTION) == pytest.approx(3.0, abs=1e-9)

    def test_maxsim_matches_nested_loops(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            q = rng.normal(size=(rng.integers(1, 6), rng.integers(2, 17)))
            d = rng.normal(size=(rng.integers(1, 6), q.shape[1]))
            expected = 0.0
            for qi in q:
                expected += max(float(np.dot(qi, dj)) for dj in d)
            got = maxsim(q, d)
            assert got == pytest.approx(expected, abs=1e-9)

    def test_dual_encoder_is_raw_dot(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        got = score(DenseVector(a, 8), DenseVector(b, 8), EngineKind.DUAL_ENCODER)
        assert got == pytest.approx(float(sum(x * y for x, y in zip(a, b))), abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(ScoringError):
            score(DenseVector(np.ones(4) / 2, 4), DenseVector(np.ones(8), 8),
                  EngineKind.DENSE)
        with pytest.raises(ScoringError):
            score(TokenMatrix(np.ones((2, 4))), TokenMatrix(np.ones((2, 8))),
                  EngineKind.LATE_INTERACTION)


class TestRetrieve:
    def test_tfidf_self_retrieval_exact(self):
        train = [sentence(["codeine", "addict"], "a"), sentence(["jail", "time"], "b"),
                 sentence(["pain", "pain", "daily"], "c")]
        idx = build_index(train, EngineKind.TFIDF)
        top = retrieve(idx, ["codeine", "addict"], 1)
        assert top[0].sentence_id == "a"
        assert top[0].score == pytest.approx(1.0, abs=1e-9)

    def test_n_larger_than_corpus_clamps(self):
        train = random_corpus(random.Random(2), 4)
        idx = build_index(train, EngineKind.TFIDF)
        out = retrieve(idx, ["pain"], 99)
        assert [r.rank for r in out] == [1, 2, 3, 4]
        assert len({r.sentence_id for r in out}) == 4

    def test_scores_non_increasing_ids_unique(self):
        rng = random.Random(3)
        train = random_corpus(rng, 20)
        idx = build_index(train, EngineKind.TFIDF)
        out = retrieve(idx, ["withdrawal", "jail"], 20)
        assert all(a.score >= b.score for a, b in zip(out, out[1:]))
        assert len({r.sentence_id for r in out}) == len(out)

    def test_tfidf_full_ranking_matches_brute_force(self):
        rng = random.Random(11)
        for trial in range(20):
            train = random_corpus(rng, rng.randint(3, 50))
            idx = build_index(train, EngineKind.TFIDF)
            query = [rng.choice(VOCAB) for _ in range(rng.randint(1, 6))]
            got = [r.sentence_id for r in retrieve(idx, query, len(train))]
            want = brute_rank(brute_tfidf_scores(train, query), len(train))
            assert got == want, f"trial {trial}"

    @pytest.mark.parametrize("kind", list(EngineKind))
    def test_all_pairs_oracle_every_engine(self, kind):
        rng = random.Random(17)
        train = random_corpus(rng, 50)
        embedder = FallbackEmbedder()
        idx = build_index(train, kind, embedder=embedder)
        query = [rng.choice(VOCAB) for _ in range(4)]
        got = retrieve(idx, query, len(train), embedder=embedder)

        if kind is EngineKind.TFIDF:
            want_scores = brute_tfidf_scores(train, query)
        else:
            want_scores = {}
            for s in train:
                if kind is EngineKind.LATE_INTERACTION:
                    q = np.stack([fallback_embed([t], "token").rows[0] for t in query])
                    d = np.stack([fallback_embed([t], "token").rows[0] for t in s.texts])
                    want_scores[s.id] = sum(
                        max(float(np.dot(qi, dj)) for dj in d) for qi in q)
                else:
                    qv = fallback_embed(query, "sentence").values
                    dv = fallback_embed(list(s.texts), "sentence").values
                    dot = float(np.dot(qv, dv))
                    if kind is EngineKind.DENSE:
                        dot /= float(np.linalg.norm(qv) * np.linalg.norm(dv))
                    want_scores[s.id] = dot
        assert [r.sentence_id for r in got] == brute_rank(want_scores, len(train))
        for r in got:
            assert r.score == pytest.approx(want_scores[r.sentence_id], abs=1e-9)

    @pytest.mark.parametrize("kind", list(EngineKind))
    def test_insertion_order_invariance(self, kind):
        rng = random.Random(23)
        train = random_corpus(rng, 15)
        embedder = FallbackEmbedder()
        idx1 = build_index(train, kind, embedder=embedder)
        shuffled = train[::-1]
        idx2 = build_index(shuffled, kind, embedder=embedder)
        query = ["withdrawal", "pain"]
        out1 = retrieve(idx1, query, 15, embedder=embedder)
        out2 = retrieve(idx2, query, 15, embedder=embedder)
        assert [(r.sentence_id, r.rank) for r in out1] == [(r.sentence_id, r.rank) for r in out2]

    @pytest.mark.parametrize("kind", list(EngineKind))
    def test_removing_rank1_promotes_rank2(self, kind):
        rng = random.Random(29)
        train = random_corpus(rng, 12)
        embedder = FallbackEmbedder()
        idx = build_index(train, kind, embedder=embedder)
        query = ["jail", "streets"]
        before = retrieve(idx, query, 2, embedder=embedder)
        after = retrieve(idx.without(before[0].sentence_id), query, 1, embedder=embedder)
        assert after[0].sentence_id == before[1].sentence_id

    def test_score_ranges(self):
        rng = random.Random(31)
        train = random_corpus(rng, 15)
        embedder = FallbackEmbedder()
        for kind in (EngineKind.TFIDF, EngineKind.DENSE):
            idx = build_index(train, kind, embedder=embedder)
            for r in retrieve(idx, ["pain", "jail"], 15, embedder=embedder):
                assert -1.0 - 1e-9 <= r.score <= 1.0 + 1e-9
        idx = build_index(train, EngineKind.LATE_INTERACTION, embedder=embedder)
        q = ["pain", "jail", "lost"]
        for r in retrieve(idx, q, 15, embedder=embedder):
            assert -len(q) - 1e-9 <= r.score <= len(q) + 1e-9


class TestFallbackEmbed:
    def test_bit_identical_repeats(self):
        a = fallback_embed(["withdrawal", "jail"], "sentence")
        b = fallback_embed(["withdrawal", "jail"], "sentence")
        assert np.array_equal(a.values, b.values)

    def test_single_token_sentence_equals_token_vector(self):
        s = fallback_embed(["codeine"], "sentence")
        t = fallback_embed(["codeine"], "token")
        assert np.allclose(s.values, t.rows[0], atol=1e-12)

    def test_morphological_neighbors_beat_strangers(self):
        def cosine(a, b):
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

        w = fallback_embed(["withdrawal"], "sentence").values
        w_dot = fallback_embed(["withdrawal."], "sentence").values
        j = fallback_embed(["jail"], "sentence").values
        assert cosine(w, w_dot) > cosine(w, j)

    def test_empty_rejected(self):
        with pytest.raises(EmbeddingProviderError):
            FallbackEmbedder().embed([[]])


class TestPersistence:
    @pytest.mark.parametrize("kind", list(EngineKind))
    def test_reload_reproduces_rankings(self, tmp_path, kind):
        rng = random.Random(41)
        train = random_corpus(rng, 10)
        embedder = FallbackEmbedder()
        idx = build_index(train, kind, embedder=embedder)
        path = tmp_path / "index.json"
        save_index(idx, path)
        reloaded = load_index(path)
        query = ["detox", "clean"]
        a = retrieve(idx, query, 10, embedder=embedder)
        b = retrieve(reloaded, query, 10, embedder=embedder)
        assert [(r.sentence_id, r.score) for r in a] == [(r.sentence_id, r.score) for r in b]

    def test_version_check(self, tmp_path):
        path = tmp_path / "index.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(IndexBuildError):
            load_index(path)


def test_query_representation_matches_document_side():
    train = [sentence(["pain", "daily"], "a"), sentence(["jail"], "b")]
    idx = build_index(train, EngineKind.TFIDF)
    q = embed_query(idx, ["pain", "daily"])
    assert q.dot(idx.sparse["a"]) == pytest.approx(1.0, abs=1e-9)


def test_engine_kind_serialized_names_exact():
    assert [k.value for k in EngineKind] == [
        "tfidf", "dense", "late_interaction", "dual_encoder"]

from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmbench.ehr import CodeId, CodeVocabulary, DayRecord, Ontology, PatientTimeline
from clmbench.errors import DataError
from clmbench.features import (
    CountFeaturizer,
    codes_before,
    featurize_counts,
    pool_code_embeddings,
    read_feature_matrix,
    write_feature_matrix,
)
from clmbench.lsi import LsiModel, project_lsi, train_lsi, truncated_projection
from clmbench.rng import substream
from clmbench.word2vec import CodeEmbeddingTable, train_word2vec

D = date


def dx(token):
    return CodeId("diagnosis", token)


def icd_ontology():
    return Ontology.from_edges(
        [
            (dx("E10.1"), dx("E10")),
            (dx("E10.2"), dx("E10")),
            (dx("E10"), dx("E08-E13")),
            (dx("E08-E13"), dx("root")),
            (dx("Z01"), dx("root")),
        ]
    )


def tl(day_codes, pid="p", birth=D(1970, 1, 1)):
    days = tuple(DayRecord(d, frozenset(c)) for d, c in sorted(day_codes.items()))
    return PatientTimeline(pid, birth, days)


class TestFeaturizeCounts:
    def test_empty_history_is_zero(self):
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        vec = featurize_counts(tl({}), D(2016, 1, 1), vocab)
        assert vec.sum() == 0.0 and vec.indices.size == 0

    def test_expansion_increments_ancestors(self):
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        onto = icd_ontology()
        timeline = tl({D(2015, 6, 1): {dx("E10.1")}})
        vec = featurize_counts(
            timeline, D(2016, 1, 1), vocab, onto, ontology_expansion=True
        )
        feat = CountFeaturizer(vocab, onto, ontology_expansion=True)
        dense = vec.to_dense()
        for token in ("E10.1", "E10", "E08-E13"):
            assert dense[feat.vocabulary.index[dx(token)]] == 1.0
        assert dense.sum() == 3.0

    def test_expansion_grows_dimension(self):
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        base = CountFeaturizer(vocab)
        grown = CountFeaturizer(vocab, icd_ontology(), ontology_expansion=True)
        assert base.dimension == 2
        assert grown.dimension == 4  # + E10 and E08-E13, family root excluded

    def test_time_bin_placement(self):
        vocab = CodeVocabulary([dx("Z01")])
        ref = D(2016, 3, 1)
        timeline = tl({ref - timedelta(days=45): {dx("Z01")}})
        vec = featurize_counts(timeline, ref, vocab, time_bins=True)
        dense = vec.to_dense()
        assert dense.shape == (4,)
        assert dense[1] == 1.0 and dense.sum() == 1.0  # [30, 180) block only

    def test_strictly_before_reference(self):
        vocab = CodeVocabulary([dx("Z01")])
        ref = D(2016, 3, 1)
        vec = featurize_counts(tl({ref: {dx("Z01")}}), ref, vocab)
        assert vec.sum() == 0.0

    def test_sum_equals_occurrences(self):
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        timeline = tl(
            {
                D(2015, 1, 1): {dx("E10.1"), dx("Z01")},
                D(2015, 2, 1): {dx("Z01")},
                D(2015, 3, 1): {dx("E10.2")},  # out of vocabulary
            }
        )
        vec = featurize_counts(timeline, D(2016, 1, 1), vocab)
        assert vec.sum() == 3.0

    @given(st.integers(1, 28), st.integers(1, 28))
    @settings(max_examples=20)
    def test_additive_over_disjoint_day_sets(self, d1, d2):
        if d1 == d2:
            d2 = (d2 % 28) + 1
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        ref = D(2016, 1, 1)
        a = tl({D(2015, 3, d1): {dx("E10.1"), dx("Z01")}})
        b = tl({D(2015, 4, d2): {dx("Z01")}})
        both = tl(
            {
                D(2015, 3, d1): {dx("E10.1"), dx("Z01")},
                D(2015, 4, d2): {dx("Z01")},
            }
        )
        for kw in ({}, {"time_bins": True}):
            va = featurize_counts(a, ref, vocab, **kw).to_dense()
            vb = featurize_counts(b, ref, vocab, **kw).to_dense()
            vboth = featurize_counts(both, ref, vocab, **kw).to_dense()
            np.testing.assert_array_equal(vboth, va + vb)

    def test_matrix_roundtrip(self, tmp_path):
        vocab = CodeVocabulary([dx("E10.1"), dx("Z01")])
        feat = CountFeaturizer(vocab)
        timeline = tl({D(2015, 1, 1): {dx("E10.1")}})
        from clmbench.ehr import PredictionExample

        examples = [PredictionExample("p", D(2016, 1, 1), 0, "inpatient_mortality")]
        matrix = feat.matrix({"p": timeline}, examples)
        path = tmp_path / "feat.bin"
        write_feature_matrix(path, matrix, feat.column_names())
        back, columns = read_feature_matrix(path)
        np.testing.assert_array_equal(back.toarray(), matrix.toarray())
        assert columns == feat.column_names()


class TestPooling:
    def table(self, rows):
        codes = [dx(f"c{i}") for i in range(len(rows))]
        return CodeEmbeddingTable(CodeVocabulary(codes), np.array(rows, dtype=float))

    def test_single_code_mean_is_row(self):
        table = self.table([[1.0, 2.0], [5.0, 6.0]])
        out = pool_code_embeddings({dx("c0"): 1}, table, mode="mean")
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_concat_width_is_3k(self):
        table = CodeEmbeddingTable(
            CodeVocabulary([dx("c0")]), np.zeros((1, 300))
        )
        out = pool_code_embeddings({dx("c0"): 2}, table, mode="concat_min_max_mean")
        assert out.shape == (900,)

    def test_concat_min_max_mean_by_hand(self):
        table = self.table([[1.0, 3.0], [3.0, 1.0]])
        out = pool_code_embeddings(
            {dx("c0"): 1, dx("c1"): 1}, table, mode="concat_min_max_mean"
        )
        np.testing.assert_array_equal(out, [1, 1, 3, 3, 2, 2])

    def test_mean_weighted_by_multiset_counts(self):
        table = self.table([[0.0], [3.0]])
        out = pool_code_embeddings({dx("c0"): 1, dx("c1"): 2}, table, mode="mean")
        assert out[0] == pytest.approx(2.0)

    def test_no_known_codes_gives_zeros(self):
        table = self.table([[1.0, 1.0]])
        out = pool_code_embeddings({dx("zz"): 1}, table, mode="concat_min_max_mean")
        np.testing.assert_array_equal(out, np.zeros(6))

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=4))
    @settings(max_examples=20)
    def test_mean_within_min_max(self, picks):
        rng = np.random.default_rng(4)
        table = self.table(rng.normal(size=(4, 3)).tolist())
        counts = {dx(f"c{i}"): 1 for i in picks}
        out = pool_code_embeddings(counts, table, mode="concat_min_max_mean")
        mn, mx, mean = out[:3], out[3:6], out[6:]
        assert np.all(mean >= mn - 1e-12) and np.all(mean <= mx + 1e-12)


def w2v_corpus():
    # "a" and "b" always share a patient's only day (and a noise pool), while
    # "far" lives in other patients with a disjoint pool, so the a/far pair
    # never falls inside one window and shares no contexts
    corpus = []
    for i in range(150):
        day = D(2014, 1, 1) + timedelta(days=i)
        corpus.append(tl({day: {dx("a"), dx("b"), dx(f"an{i % 9}")}}, pid=f"ab{i}"))
        corpus.append(
            tl({day: {dx("far"), dx(f"fn{(i + 3) % 9}"), dx(f"fn{i % 4}")}}, pid=f"f{i}")
        )
    return corpus


class TestWord2Vec:
    def test_same_seed_identical(self):
        corpus = w2v_corpus()
        t1 = train_word2vec(corpus, dim=16, rng=substream(5, "w2v"), epochs=2)
        t2 = train_word2vec(corpus, dim=16, rng=substream(5, "w2v"), epochs=2)
        np.testing.assert_array_equal(t1.matrix, t2.matrix)

    def test_cooccurring_codes_closer(self):
        table = train_word2vec(w2v_corpus(), dim=16, rng=substream(5, "w2v"))

        def cosine(u, v):
            return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

        a, b, far = table.row(dx("a")), table.row(dx("b")), table.row(dx("far"))
        assert cosine(a, b) > cosine(a, far)

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            train_word2vec([], dim=8, rng=substream(1))


class TestLsi:
    def corpus(self, n=25, n_codes=12, seed=3):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            days = {}
            for j in range(3):
                day = D(2014, 1, 1) + timedelta(days=30 * j + i)
                days[day] = {dx(f"c{k}") for k in rng.choice(n_codes, size=4, replace=False)}
            out.append(tl(days, pid=f"p{i}"))
        return out

    def test_rank_one_matrix_recovered(self):
        # oracle: dense SVD of a 20x30 outer product
        u = np.linspace(1, 2, 20)[:, None]
        v = np.linspace(-1, 1, 30)[None, :]
        X = u @ v
        proj = truncated_projection(X, 1)
        recon = X @ proj @ proj.T
        assert np.linalg.norm(X - recon) < 1e-8

    def test_matches_dense_svd_truncation(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            X = rng.normal(size=(rng.integers(10, 41), rng.integers(12, 61)))
            r = int(rng.integers(1, 9))
            proj = truncated_projection(X, r)
            U, S, Vt = np.linalg.svd(X, full_matrices=False)
            oracle = U[:, :r] @ np.diag(S[:r]) @ Vt[:r]
            assert np.linalg.norm(X @ proj @ proj.T - oracle) < 1e-8

    def test_projection_orthonormal(self):
        model = train_lsi(self.corpus(), rank=5, rng=substream(9, "lsi"))
        gram = model.projection.T @ model.projection
        np.testing.assert_allclose(gram, np.eye(model.rank), atol=1e-6)

    def test_same_seed_identical(self):
        a = train_lsi(self.corpus(), rank=4, rng=substream(9, "lsi"))
        b = train_lsi(self.corpus(), rank=4, rng=substream(9, "lsi"))
        np.testing.assert_array_equal(a.projection, b.projection)
        np.testing.assert_array_equal(a.idf, b.idf)

    def test_rank_reduced_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            model = train_lsi(self.corpus(n=6, n_codes=5), rank=50, rng=substream(2, "lsi"))
        assert model.rank < 50
        assert "reduced" in caplog.text

    def test_training_document_projection_self_consistent(self):
        # single-day patients make the sampled cut deterministic
        corpus = [
            tl({D(2014, 1, 1): {dx("c0"), dx("c1")}}, pid="p0"),
            tl({D(2014, 1, 2): {dx("c1"), dx("c2")}}, pid="p1"),
            tl({D(2014, 1, 3): {dx("c0"), dx("c2"), dx("c3")}}, pid="p2"),
        ]
        model = train_lsi(corpus, rank=2, rng=substream(7, "lsi"))
        for timeline in corpus:
            counts = codes_before(timeline, D(2015, 1, 1))
            direct = model.weigh(counts) @ model.projection
            np.testing.assert_allclose(project_lsi(timeline, D(2015, 1, 1), model), direct, atol=1e-8)

    def test_raw_tf_projection_linear(self):
        corpus = self.corpus()
        model = train_lsi(corpus, rank=3, rng=substream(9, "lsi"), tf_mode="raw")
        counts = codes_before(corpus[0], D(2015, 1, 1))
        doubled = {c: 2 * n for c, n in counts.items()}
        np.testing.assert_allclose(
            model.project_counts(doubled), 2.0 * model.project_counts(counts), atol=1e-10
        )

    def test_empty_document_projects_to_zero(self):
        model = train_lsi(self.corpus(), rank=3, rng=substream(9, "lsi"))
        out = project_lsi(tl({}), D(2015, 1, 1), model)
        np.testing.assert_array_equal(out, np.zeros(model.rank))

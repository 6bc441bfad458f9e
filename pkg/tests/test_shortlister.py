import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import random_block, random_model
from decaf.clustering import LabelClustering
from decaf.corpus import Dataset, label_matrix
from decaf.embedding import CombinationBlock, EmbeddingBlock, embed_document, embed_label
from decaf.linalg import make_rng, relu, sigmoid
from decaf.model import Model
from decaf.shortlister import (
    Shortlister,
    build_meta_problem,
    meta_classifier_module1,
    meta_classifier_module2,
    meta_text_embedding,
    positive_cluster_ranks,
    recall_at_shortlist,
    recall_curve,
    select_beam,
    shortlist,
    shortlist_batch,
    shortlist_embedding,
)
from decaf.synthetic import random_dataset
from decaf.trainer import shortlist_embeddings


def clustering(*clusters, L=None):
    cl = [np.asarray(c, dtype=np.int64) for c in clusters]
    L = L if L is not None else sum(c.size for c in cl)
    levels = int(np.log2(len(cl)))
    return LabelClustering(cl, levels, L)


class TestMetaProblem:
    def test_disjoint_texts_merge(self):
        Z = sp.csr_matrix(np.array([[1.0, 0, 0], [0, 2.0, 0]]))
        d = Dataset(sp.csr_matrix((1, 3)), label_matrix([[0]], 2), Z)
        meta = build_meta_problem(d, clustering([0, 1]))
        np.testing.assert_array_equal(meta.meta_texts.toarray(), [[1.0, 2.0, 0]])

    def test_shared_token_weights_add(self):
        Z = sp.csr_matrix(np.array([[0.5, 1.0], [0.25, 0.0], [0.0, 3.0]]))
        d = Dataset(sp.csr_matrix((1, 2)), label_matrix([[0]], 3), Z)
        cl = clustering([0, 1], [2])
        meta = build_meta_problem(d, cl)
        for m, members in enumerate(cl.clusters):
            np.testing.assert_allclose(meta.meta_texts[m].toarray().ravel(), Z.toarray()[members].sum(axis=0))

    def test_meta_positive_from_member_label(self):
        d = Dataset(sp.csr_matrix((2, 2)), label_matrix([[3], [0, 3]], 4), sp.csr_matrix((4, 2)))
        meta = build_meta_problem(d, clustering([0], [2], [1], [3]))
        np.testing.assert_array_equal(meta.meta_labels[0].indices, [3])
        np.testing.assert_array_equal(meta.meta_labels[1].indices, [0, 3])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 7), max_size=4, unique=True), min_size=1, max_size=10),
           st.permutations(list(range(8))))
    def test_meta_positives_brute_force(self, truth, perm):
        cl = clustering(*np.array_split(np.array(perm), 4))
        d = Dataset(sp.csr_matrix((len(truth), 1)), label_matrix(truth, 8), sp.csr_matrix((8, 1)))
        meta = build_meta_problem(d, cl)
        for i, t in enumerate(truth):
            expected = sorted({m for m, c in enumerate(cl.clusters) for l in t if l in c})
            np.testing.assert_array_equal(meta.meta_labels[i].indices, expected)


def simple_model(rng, V=6, D=3, L=4):
    return Model(
        E=rng.normal(size=(V, D)),
        doc_block=random_block(rng, D),
        label_block=random_block(rng, D),
        classifier_gates=CombinationBlock.zeros(D, dtype=np.float64),
        label_texts=sp.csr_matrix(np.abs(rng.normal(size=(L, V)))),
    )


class TestMetaClassifiers:
    def test_module1_empty_text(self):
        m = simple_model(make_rng(0))
        np.testing.assert_array_equal(meta_classifier_module1(m, sp.csr_matrix((1, 6))), 0.0)

    def test_module1_single_label_cluster(self):
        m = simple_model(make_rng(1))
        z = m.label_texts[2]
        np.testing.assert_allclose(meta_classifier_module1(m, z), embed_label(m, z))

    def test_module2_zero_gates(self):
        u1, u2 = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
        np.testing.assert_allclose(meta_classifier_module2(CombinationBlock.zeros(2), u1, u2), 0.5 * (u1 + u2))

    def test_module2_zero_refinement(self):
        gates = CombinationBlock(np.array([0.3, -0.2]), np.array([1.1, -0.7]))
        u1 = np.array([2.0, -4.0])
        np.testing.assert_allclose(meta_classifier_module2(gates, u1, np.zeros(2)), sigmoid(gates.beta) * u1)

    def test_text_embedding_sums_member_embeddings(self):
        m = simple_model(make_rng(2))
        cl = clustering([0, 3], [1, 2])
        u1 = meta_text_embedding(m, m.label_texts, cl)
        z1 = embed_label(m, m.label_texts)
        np.testing.assert_allclose(u1, [z1[0] + z1[3], z1[1] + z1[2]])


class TestShortlist:
    def test_full_beam_returns_all_labels(self):
        s = Shortlister(clustering([0, 2], [1, 3]), make_rng(0).normal(size=(2, 3)))
        out = shortlist(s, np.ones(3), 2)
        assert sorted(out.label_ids.tolist()) == [0, 1, 2, 3]

    def test_opposite_meta_classifiers(self):
        x = np.array([0.5, 1.0, 0.2])
        s = Shortlister(clustering([0], [1]), np.stack([x, -x]))
        out = shortlist(s, x, 1)
        np.testing.assert_array_equal(out.cluster_ids, [0])
        np.testing.assert_array_equal(out.label_ids, [0])

    def test_ties_go_to_smaller_cluster(self):
        s = Shortlister(clustering([0], [1], [2], [3]), np.array([[0.0], [1.0], [1.0], [1.0]]))
        np.testing.assert_array_equal(shortlist(s, np.ones(1), 2).cluster_ids, [1, 2])
        top, _ = shortlist_batch(s, np.ones((2, 1)), 2)
        np.testing.assert_array_equal(top, [[1, 2], [1, 2]])

    @pytest.mark.parametrize("B", [0, 3])
    def test_beam_out_of_range(self, B):
        s = Shortlister(clustering([0], [1]), np.eye(2))
        with pytest.raises(ValueError):
            shortlist(s, np.ones(2), B)
        with pytest.raises(ValueError):
            recall_at_shortlist(s, np.ones((1, 2)), sp.csr_matrix(np.ones((1, 2))), B)

    def test_size_is_sum_of_chosen_clusters(self):
        s = Shortlister(clustering([0, 1, 2], [3, 4], [5, 6], [7]), make_rng(3).normal(size=(4, 2)))
        out = shortlist(s, np.array([1.0, -0.5]), 3)
        assert out.label_ids.size == sum(len(s.clustering.clusters[m]) for m in out.cluster_ids)

    def test_balanced_shortlist_size_at_scale(self):
        # leaf sizes of recursive halving of 1,305,265 labels into 2^17 clusters
        L, K, B = 1305265, 2**17, 100
        sizes = np.array([L])
        while sizes.size < K:
            sizes = np.stack([(sizes + 1) // 2, sizes // 2], axis=1).ravel()
        chosen = make_rng(0).choice(K, size=B, replace=False)
        total = int(sizes[chosen].sum())
        assert round(L * B / K) == 996
        assert abs(total - L * B / K) <= B

    def test_batch_matches_single(self):
        s = Shortlister(clustering([0], [1], [2], [3]), make_rng(4).normal(size=(4, 3)))
        X = make_rng(5).normal(size=(6, 3))
        top, vals = shortlist_batch(s, X, 2)
        for i in range(6):
            one = shortlist(s, X[i], 2)
            np.testing.assert_array_equal(top[i], one.cluster_ids)
            np.testing.assert_allclose(vals[i], one.cluster_scores)


class TestRecall:
    def setup_method(self):
        self.d = random_dataset(2, num_points=40, num_labels=16, num_tokens=30)
        self.model = random_model(self.d, 4, 2, seed=3)
        self.sl = self.model.shortlister
        self.emb = shortlist_embeddings(self.model, self.d.features)

    def test_brute_force_recall(self):
        for B in range(1, 5):
            hits = total = 0
            for i in range(self.d.num_points):
                ids = shortlist(self.sl, self.emb[i], B).label_ids
                truth = self.d.ground_truth(i)
                hits += np.isin(truth, ids).sum()
                total += truth.size
            assert recall_at_shortlist(self.sl, self.emb, self.d.labels, B) == hits / total

    def test_full_beam(self):
        assert recall_at_shortlist(self.sl, self.emb, self.d.labels, 4) == 1.0

    def test_single_doc_positive_in_top_cluster(self):
        x = self.emb[:1]
        top = shortlist(self.sl, x[0], 1).label_ids
        y = sp.csr_matrix(([1.0], ([0], [top[0]])), shape=(1, 16))
        assert recall_at_shortlist(self.sl, x, y, 1) == 1.0

    def test_select_beam_extremes(self):
        assert select_beam(self.sl, self.emb, self.d.labels, 0.0) == 1
        curve = recall_curve(self.sl, self.emb, self.d.labels)
        expected = int(np.flatnonzero(curve >= 1.0)[0]) + 1
        assert select_beam(self.sl, self.emb, self.d.labels, 1.0) == expected

    def test_ranks(self):
        ranks = positive_cluster_ranks(self.sl, self.emb, self.d.labels)
        assert ranks.size == self.d.labels.nnz
        assert ranks.min() >= 0 and ranks.max() < 4

    def test_no_positives(self):
        y = sp.csr_matrix((self.d.num_points, 16))
        assert recall_at_shortlist(self.sl, self.emb, y, 1) == 1.0


class TestFrozenEncoder:
    def test_uses_own_encoder_when_present(self):
        rng = make_rng(6)
        m = simple_model(rng)
        x = sp.csr_matrix(np.abs(rng.normal(size=(2, 6))))
        plain = Shortlister(clustering([0, 1], [2, 3]), rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(shortlist_embedding(plain, m, x), embed_document(m, x))
        E2 = rng.normal(size=(6, 3))
        blk2 = EmbeddingBlock.identity(3, dtype=np.float64)
        frozen = Shortlister(plain.clustering, plain.H, encoder_E=E2, encoder_block=blk2)
        np.testing.assert_allclose(shortlist_embedding(frozen, m, x), relu(x @ E2), rtol=1e-12)
        # the frozen copy does not follow later changes to the model
        m.E = m.E * 2
        np.testing.assert_allclose(shortlist_embedding(frozen, m, x), relu(x @ E2), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_recall_monotone_property(seed):
    d = random_dataset(seed % 7, num_points=30, num_labels=16, num_tokens=20)
    model = random_model(d, 3, 3, seed=seed)
    emb = shortlist_embeddings(model, d.features)
    curve = recall_curve(model.shortlister, emb, d.labels)
    assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0

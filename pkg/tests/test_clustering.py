import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from decaf.clustering import (
    LabelCentroids,
    balanced_split,
    centroids_dense,
    centroids_sparse,
    hierarchical_cluster,
)
from decaf.corpus import Dataset, label_matrix
from decaf.linalg import make_rng


def dataset(features, truth, L):
    return Dataset(sp.csr_matrix(np.asarray(features, dtype=float)), label_matrix(truth, L))


def unit_centroids(vecs):
    vecs = np.asarray(vecs, dtype=float)
    n = np.linalg.norm(vecs, axis=1, keepdims=True)
    zero = n[:, 0] == 0
    return LabelCentroids(np.divide(vecs, n, out=np.zeros_like(vecs), where=n > 0), zero)


class TestCentroids:
    def test_single_positive_is_normalised_doc(self):
        d = dataset([[3.0, 4.0, 0.0]], [[0]], 1)
        np.testing.assert_allclose(centroids_sparse(d).vectors.toarray(), [[0.6, 0.8, 0.0]])

    def test_duplicate_docs_same_direction(self):
        one = centroids_sparse(dataset([[1.0, 2.0]], [[0]], 1)).vectors.toarray()
        two = centroids_sparse(dataset([[1.0, 2.0], [1.0, 2.0]], [[0], [0]], 1)).vectors.toarray()
        np.testing.assert_allclose(one, two)

    def test_three_label_brute_force(self):
        X = np.array([[1.0, 0, 2], [0, 1.0, 1], [3.0, 1, 0]])
        truth = [[0, 1], [1], [0, 2]]
        c = centroids_sparse(dataset(X, truth, 4))
        for l in range(4):
            acc = sum((X[i] for i in range(3) if l in truth[i]), np.zeros(3))
            n = np.linalg.norm(acc)
            expected = acc / n if n else acc
            np.testing.assert_allclose(c.vectors[l].toarray().ravel(), expected, rtol=1e-14)
        np.testing.assert_array_equal(c.is_zero, [False, False, False, True])

    def test_dense_matches_matvec(self):
        rng = make_rng(0)
        X = np.abs(rng.normal(size=(4, 5)))
        E = rng.normal(size=(5, 3))
        truth = [[0], [0, 1], [2], [1]]
        c = centroids_dense(dataset(X, truth, 3), E)
        for l in range(3):
            acc = sum(X[i] @ E for i in range(4) if l in truth[i])
            np.testing.assert_allclose(c.vectors[l], acc / np.linalg.norm(acc), rtol=1e-12)
        assert not c.is_sparse


def _within_similarity(C, part):
    return sum(np.linalg.norm(C[list(side)].sum(axis=0)) for side in part)


class TestBalancedSplit:
    def test_two_labels(self):
        s = balanced_split(np.array([[1.0, 0], [1.0, 0]]), make_rng(0))
        assert (s.first.size, s.second.size) == (1, 1)

    def test_five_labels(self):
        s = balanced_split(make_rng(1).normal(size=(5, 3)), make_rng(0))
        assert (s.first.size, s.second.size) == (3, 2)

    def test_too_few(self):
        with pytest.raises(ValueError):
            balanced_split(np.ones((1, 2)), make_rng(0))

    def test_orthogonal_pairs_match_exhaustive_best(self):
        C = np.array([[1.0, 0], [0.95, 0.05], [0, 1.0], [0.05, 0.95]])
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        best = max(
            ((set(a), set(range(4)) - set(a)) for a in itertools.combinations(range(4), 2)),
            key=lambda part: _within_similarity(C, part),
        )
        for seed in range(5):
            s = balanced_split(C, make_rng(seed))
            got = {frozenset(s.first.tolist()), frozenset(s.second.tolist())}
            assert got == {frozenset(best[0]), frozenset(best[1])}

    def test_objective_non_decreasing(self):
        for seed in range(10):
            C = unit_centroids(make_rng(seed).normal(size=(41, 6))).vectors
            s = balanced_split(C, make_rng(seed + 100))
            assert all(b >= a - 1e-12 for a, b in zip(s.objective, s.objective[1:]))

    def test_zero_rows_are_placed(self):
        C = np.zeros((6, 3))
        C[0, 0] = 1.0
        s = balanced_split(C, make_rng(3))
        assert sorted(np.concatenate([s.first, s.second]).tolist()) == list(range(6))
        assert (s.first.size, s.second.size) == (3, 3)

    def test_sparse_and_dense_agree(self):
        C = unit_centroids(np.abs(make_rng(2).normal(size=(12, 4)))).vectors
        a = balanced_split(C, make_rng(5))
        b = balanced_split(sp.csr_matrix(C), make_rng(5))
        np.testing.assert_array_equal(a.first, b.first)


class TestHierarchical:
    def test_singletons(self):
        cl = hierarchical_cluster(unit_centroids(make_rng(0).normal(size=(8, 3))), 3)
        assert sorted(cl.sizes().tolist()) == [1] * 8

    def test_nine_labels_three_levels(self):
        cl = hierarchical_cluster(unit_centroids(make_rng(0).normal(size=(9, 3))), 3)
        assert sorted(cl.sizes().tolist()) == [1] * 7 + [2]

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            hierarchical_cluster(unit_centroids(np.eye(3)), 2)

    def test_deterministic(self):
        c = unit_centroids(make_rng(4).normal(size=(50, 5)))
        a = hierarchical_cluster(c, 3, seed=7)
        b = hierarchical_cluster(c, 3, seed=7)
        for x, y in zip(a.clusters, b.clusters):
            np.testing.assert_array_equal(x, y)

    def test_assignment_matrix(self):
        cl = hierarchical_cluster(unit_centroids(make_rng(5).normal(size=(10, 3))), 2)
        A = cl.assignment_matrix().toarray()
        np.testing.assert_array_equal(A.sum(axis=0), 1)
        for m, members in enumerate(cl.clusters):
            np.testing.assert_array_equal(np.flatnonzero(A[m]), np.sort(members))
        np.testing.assert_array_equal(cl.cluster_of()[cl.clusters[2]], 2)

    def test_zero_levels(self):
        cl = hierarchical_cluster(unit_centroids(make_rng(0).normal(size=(4, 2))), 0)
        assert cl.num_clusters == 1 and cl.clusters[0].size == 4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(0, 6), st.integers(0, 2**31))
def test_partition_and_balance(L, levels, seed):
    if L < 2**levels:
        return
    vecs = make_rng(seed).normal(size=(L, 4))
    vecs[make_rng(seed + 1).random(L) < 0.1] = 0.0
    cl = hierarchical_cluster(unit_centroids(vecs), levels, seed=seed)
    cl.validate()
    sizes = cl.sizes()
    assert sizes.max() - sizes.min() <= 1
    for n, a, b in cl.split_log:
        assert (a, b) == ((n + 1) // 2, n // 2)

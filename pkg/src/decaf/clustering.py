"""Label centroids and balanced hierarchical binary clustering.

Each split is a constrained spherical 2-means: labels are ranked by
``<c, mu_1> - <c, mu_2>`` and the top ``ceil(n/2)`` go to the first side, so
every split is exactly ``ceil(n/2)`` / ``floor(n/2)``.  Only the leaves of the
hierarchy are kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import make_rng

__all__ = [
    "LabelCentroids",
    "LabelClustering",
    "Split",
    "centroids_sparse",
    "centroids_dense",
    "balanced_split",
    "hierarchical_cluster",
]


@dataclass
class LabelCentroids:
    """Unit-norm centroid per label; ``is_zero`` marks labels with no signal."""

    vectors: np.ndarray | sp.csr_matrix
    is_zero: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.vectors.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.vectors)


@dataclass
class LabelClustering:
    clusters: list[np.ndarray]
    levels: int
    num_labels: int
    # (node size, first side, second side) for every split, root first
    split_log: list[tuple[int, int, int]] = field(default_factory=list, repr=False)

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self) -> np.ndarray:
        out = np.full(self.num_labels, -1, dtype=np.int64)
        for m, members in enumerate(self.clusters):
            out[members] = m
        return out

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    def assignment_matrix(self) -> sp.csr_matrix:
        """K x L 0/1 matrix with a one at (m, l) iff l is in cluster m."""
        sizes = self.sizes()
        indptr = np.concatenate([[0], np.cumsum(sizes)])
        indices = np.concatenate(self.clusters) if self.clusters else np.zeros(0, np.int64)
        return sp.csr_matrix(
            (np.ones(indices.size), indices, indptr), shape=(len(self.clusters), self.num_labels)
        )

    def validate(self) -> None:
        seen = np.concatenate(self.clusters) if self.clusters else np.zeros(0, np.int64)
        if seen.size != self.num_labels or np.unique(seen).size != self.num_labels:
            raise ValueError("clusters must partition the label set")


def _normalize_rows(mat):
    if sp.issparse(mat):
        mat = sp.csr_matrix(mat, dtype=np.float64)
        norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        return sp.diags(scale) @ mat, norms == 0
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return mat * scale[:, None], norms == 0


def centroids_sparse(d) -> LabelCentroids:
    """``c_l`` = normalised sum of the BoW vectors of l's positive documents."""
    vectors, zero = _normalize_rows(sp.csr_matrix(d.labels.T @ d.features))
    vectors = sp.csr_matrix(vectors)
    vectors.sort_indices()
    return LabelCentroids(vectors, zero)


def centroids_dense(d, E: np.ndarray) -> LabelCentroids:
    """``c_l`` = normalised sum of ``E^T x_i`` over l's positive documents."""
    doc_emb = np.asarray(d.features @ np.asarray(E, dtype=np.float64))
    vectors, zero = _normalize_rows(np.asarray(d.labels.T @ doc_emb))
    return LabelCentroids(vectors, zero)


@dataclass
class Split:
    first: np.ndarray
    second: np.ndarray
    objective: list[float]
    iterations: int


def _row_sum(mat, rows):
    if rows.size == 0:
        return np.zeros(mat.shape[1])
    if sp.issparse(mat):
        return np.asarray(mat[rows].sum(axis=0)).ravel()
    return mat[rows].sum(axis=0)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def balanced_split(vectors, rng, label_ids=None, max_iter: int = 20, tol: float = 1e-4) -> Split:
    """Split the rows of ``vectors`` into sides of size ceil(n/2) and floor(n/2).

    Rows with zero norm are placed at uniformly random positions (subject to
    the balance constraint) before iterating.  Ties in the similarity
    difference go to the smaller label id.
    """
    n = vectors.shape[0]
    if n < 2:
        raise ValueError("balanced_split needs at least two labels")
    ids = np.arange(n) if label_ids is None else np.asarray(label_ids, dtype=np.int64)
    if sp.issparse(vectors):
        vectors = sp.csr_matrix(vectors)
        norms = np.sqrt(np.asarray(vectors.multiply(vectors).sum(axis=1)).ravel())
    else:
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1)
    n_first = (n + 1) // 2

    zero = np.flatnonzero(norms == 0)
    live = np.flatnonzero(norms > 0)
    on_first = np.zeros(n, dtype=bool)
    if zero.size:
        slots = rng.permutation(n)[: zero.size]
        on_first[zero] = slots < n_first
    live_first = n_first - int(on_first[zero].sum())

    objective: list[float] = []
    iters = 0
    C = vectors[live]
    if live.size >= 2 and 0 < live_first < live.size:
        a, b = rng.choice(live.size, size=2, replace=False)
        mu1 = _unit(_row_sum(C, np.array([a])))
        mu2 = _unit(_row_sum(C, np.array([b])))
        prev = None
        for iters in range(1, max_iter + 1):
            delta = np.asarray(C @ mu1).ravel() - np.asarray(C @ mu2).ravel()
            order = np.lexsort((ids[live], -delta))
            assign = np.zeros(live.size, dtype=bool)
            assign[order[:live_first]] = True
            s1, s2 = _row_sum(C, np.flatnonzero(assign)), _row_sum(C, np.flatnonzero(~assign))
            mu1, mu2 = _unit(s1), _unit(s2)
            objective.append(float(np.linalg.norm(s1) + np.linalg.norm(s2)))
            if prev is not None and np.array_equal(assign, prev):
                break
            if len(objective) > 1 and abs(objective[-1] - objective[-2]) <= tol * abs(objective[-2]):
                break
            prev = assign
        on_first[live[assign]] = True
    else:
        # no usable geometry: fill by ascending label id
        order = live[np.argsort(ids[live], kind="stable")]
        on_first[order[:live_first]] = True

    first = np.sort(ids[on_first])
    second = np.sort(ids[~on_first])
    return Split(first, second, objective, iters)


def hierarchical_cluster(centroids: LabelCentroids, num_levels: int, seed=0) -> LabelClustering:
    """Recursive balanced splits ``num_levels`` deep; returns 2**num_levels leaves.

    Node ``j`` at depth ``d`` draws from the stream ``(seed, d, j)`` so the
    result does not depend on the order in which nodes are processed.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**62))
    num_labels = centroids.num_labels
    k = 2**num_levels
    if num_labels < k:
        raise ValueError(f"cannot form {k} clusters from {num_labels} labels")
    vectors = centroids.vectors
    nodes = [np.arange(num_labels, dtype=np.int64)]
    log: list[tuple[int, int, int]] = []
    for depth in range(num_levels):
        children = []
        for j, members in enumerate(nodes):
            split = balanced_split(vectors[members], make_rng(seed, depth, j), label_ids=members)
            log.append((members.size, split.first.size, split.second.size))
            children.extend([split.first, split.second])
        nodes = children
    return LabelClustering(nodes, num_levels, num_labels, log)

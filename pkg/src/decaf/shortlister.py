"""Meta-label problem, cluster shortlisting and recall analytics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .clustering import LabelClustering
from .embedding import CombinationBlock, EmbeddingBlock, bag_embed, block_forward, combine, embed_document, embed_label
from .linalg import relu

__all__ = [
    "MetaProblem",
    "Shortlister",
    "Shortlist",
    "build_meta_problem",
    "meta_classifier_module1",
    "meta_classifier_module2",
    "meta_text_embedding",
    "shortlist",
    "shortlist_embedding",
    "shortlist_batch",
    "positive_cluster_ranks",
    "recall_at_shortlist",
    "recall_curve",
    "select_beam",
]

_CHUNK = 1024


@dataclass
class MetaProblem:
    clustering: LabelClustering
    meta_texts: sp.csr_matrix  # K x V, u_m = sum of member label texts
    meta_labels: sp.csr_matrix  # N x K 0/1


@dataclass
class Shortlister:
    """Clustering plus materialised meta-classifiers ``H`` (K x D).

    ``refinement`` and ``gates`` are only present for the fine-tuned form.
    ``encoder_E`` / ``encoder_block`` hold a frozen copy of the document
    encoder the meta-classifiers were trained with; when absent the model's
    own encoder is used.
    """

    clustering: LabelClustering
    H: np.ndarray
    refinement: np.ndarray | None = None
    gates: CombinationBlock | None = None
    encoder_E: np.ndarray | None = None
    encoder_block: EmbeddingBlock | None = None

    @property
    def num_clusters(self) -> int:
        return self.H.shape[0]


@dataclass
class Shortlist:
    cluster_ids: np.ndarray
    cluster_scores: np.ndarray
    label_ids: np.ndarray


def build_meta_problem(d, clustering: LabelClustering) -> MetaProblem:
    A = clustering.assignment_matrix()
    if d.label_texts is not None:
        meta_texts = sp.csr_matrix(A @ d.label_texts)
    else:
        meta_texts = sp.csr_matrix((clustering.num_clusters, d.num_tokens))
    meta_texts.sort_indices()
    hits = sp.csr_matrix(d.labels @ A.T)
    hits.data[:] = 1.0
    hits.eliminate_zeros()
    hits.sort_indices()
    return MetaProblem(clustering, meta_texts, hits)


def meta_classifier_module1(model, meta_text, mask=None) -> np.ndarray:
    """Constrained meta-classifier ``h_m = E_L(u_m)``."""
    return embed_label(model, meta_text, mask)


def meta_text_embedding(model, label_texts, clustering: LabelClustering, mask=None) -> np.ndarray:
    """``u1_m`` = sum over members of ``E_L(z_l)`` (not ``E_L`` of the summed text)."""
    z1 = embed_label(model, label_texts, mask)
    return np.asarray(clustering.assignment_matrix() @ z1)


def meta_classifier_module2(gates: CombinationBlock, text_part, refinement) -> np.ndarray:
    """``h_m = sigmoid(alpha_P) * u2_m + sigmoid(beta_P) * u1_m``."""
    return combine(gates, refinement, text_part)


def shortlist_embedding(s: Shortlister, model, x) -> np.ndarray:
    """Document embedding the shortlister scores against."""
    if s.encoder_E is None:
        return embed_document(model, x)
    return relu(block_forward(s.encoder_block, bag_embed(s.encoder_E, x)))


def _order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties to the smaller cluster id
    return np.argsort(-scores, axis=-1, kind="stable")


def shortlist(s: Shortlister, xhat: np.ndarray, B: int) -> Shortlist:
    k = s.num_clusters
    if not 1 <= B <= k:
        raise ValueError(f"beam size must be in [1, {k}], got {B}")
    scores = np.asarray(s.H, dtype=np.float64) @ np.asarray(xhat, dtype=np.float64)
    top = _order(scores)[:B]
    members = [s.clustering.clusters[m] for m in top]
    labels = np.concatenate(members) if members else np.zeros(0, np.int64)
    return Shortlist(top, scores[top], labels)


def shortlist_batch(s: Shortlister, embeddings: np.ndarray, B: int):
    """Top-B cluster ids and scores for each row of ``embeddings``."""
    k = s.num_clusters
    if not 1 <= B <= k:
        raise ValueError(f"beam size must be in [1, {k}], got {B}")
    H = np.asarray(s.H, dtype=np.float64)
    ids, vals = [], []
    for lo in range(0, embeddings.shape[0], _CHUNK):
        scores = np.asarray(embeddings[lo:lo + _CHUNK], dtype=np.float64) @ H.T
        top = _order(scores)[:, :B]
        ids.append(top)
        vals.append(np.take_along_axis(scores, top, axis=1))
    if not ids:
        return np.zeros((0, B), np.int64), np.zeros((0, B))
    return np.vstack(ids), np.vstack(vals)


def positive_cluster_ranks(s: Shortlister, embeddings: np.ndarray, labels) -> np.ndarray:
    """0-based rank of the cluster holding each positive (document, label) pair."""
    labels = sp.csr_matrix(getattr(labels, "labels", labels))
    cluster_of = s.clustering.cluster_of()
    H = np.asarray(s.H, dtype=np.float64)
    k = H.shape[0]
    out = []
    for lo in range(0, embeddings.shape[0], _CHUNK):
        block = labels[lo:lo + _CHUNK]
        if block.nnz == 0:
            continue
        scores = np.asarray(embeddings[lo:lo + _CHUNK], dtype=np.float64) @ H.T
        order = _order(scores)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(k)[None, :].repeat(order.shape[0], 0), axis=1)
        rows = np.repeat(np.arange(block.shape[0]), np.diff(block.indptr))
        out.append(rank[rows, cluster_of[block.indices]])
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def recall_at_shortlist(s: Shortlister, embeddings, labels, B: int) -> float:
    """Fraction of positive pairs whose label falls in the top-B clusters."""
    if not 1 <= B <= s.num_clusters:
        raise ValueError(f"beam size must be in [1, {s.num_clusters}], got {B}")
    ranks = positive_cluster_ranks(s, embeddings, labels)
    if ranks.size == 0:
        return 1.0
    return int(np.count_nonzero(ranks < B)) / ranks.size


def recall_curve(s: Shortlister, embeddings, labels) -> np.ndarray:
    """``curve[B - 1]`` is the recall at beam size ``B`` for B = 1..K."""
    ranks = positive_cluster_ranks(s, embeddings, labels)
    k = s.num_clusters
    if ranks.size == 0:
        return np.ones(k)
    return np.cumsum(np.bincount(ranks, minlength=k)) / ranks.size


def select_beam(s: Shortlister, embeddings, labels, target_recall: float) -> int:
    """Smallest B whose recall reaches ``target_recall``."""
    curve = recall_curve(s, embeddings, labels)
    hit = np.flatnonzero(curve >= target_recall)
    return int(hit[0]) + 1 if hit.size else s.num_clusters

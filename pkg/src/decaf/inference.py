"""Prediction: embed, shortlist clusters, score their labels, rank.

Label scores are ``sigmoid(<w_l, x>) * sigmoid(<h_m, x>)`` for labels in the
top-B clusters; every other label scores 0.  Inner products on the
prediction path go through ``np.einsum`` (not BLAS) so a row's result does
not depend on how many rows are computed together: classifiers taken from a
precomputed matrix and classifiers built on the fly give identical bits, and
results do not depend on the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import SparseVector
from .embedding import embed_document
from .shortlister import shortlist_embedding
from .linalg import relu, sigmoid

__all__ = [
    "Prediction",
    "OpCounter",
    "classifier_rows",
    "precompute_classifiers",
    "predict",
    "predict_batch",
    "predict_ensemble",
    "count_ops",
    "default_beam",
]


@dataclass
class Prediction:
    labels: np.ndarray  # int64, ranked
    scores: np.ndarray  # float64, non-increasing

    def __len__(self):
        return self.labels.size

    def pairs(self):
        return list(zip(self.labels.tolist(), self.scores.tolist()))


@dataclass
class OpCounter:
    shortlister_dots: int = 0
    ranker_dots: int = 0

    @property
    def total(self) -> int:
        return self.shortlister_dots + self.ranker_dots


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def classifier_rows(model, label_ids) -> np.ndarray:
    """``w_l`` for ``label_ids``, computed row by row."""
    ids = np.asarray(label_ids, dtype=np.int64)
    D = model.dim
    if model.refinement is not None:
        z2 = _f64(model.refinement[ids])
    else:
        z2 = np.zeros((ids.size, D))
    gates = model.classifier_gates
    if model.classifier_mode == "z2":
        return sigmoid(gates.beta) * z2
    blk = model.label_block
    # csr @ dense is evaluated one output row at a time
    r0 = np.asarray(model.label_texts[ids] @ _f64(model.E))
    z1 = sigmoid(blk.alpha) * r0 + sigmoid(blk.beta) * np.einsum("ij,kj->ik", relu(r0), _f64(blk.R))
    if model.classifier_mode == "z1":
        return z1
    return sigmoid(gates.alpha) * z1 + sigmoid(gates.beta) * z2


def precompute_classifiers(model, chunk: int = 4096) -> np.ndarray:
    """All classifiers as an L x D float64 matrix."""
    L = model.num_labels
    if L == 0:
        return np.zeros((0, model.dim))
    return np.vstack([classifier_rows(model, np.arange(lo, min(lo + chunk, L))) for lo in range(0, L, chunk)])


def default_beam(model) -> int:
    sl = model.shortlister
    B = model.config.get("selected_beam") or model.config.get("beam")
    return int(B) if B else sl.num_clusters


def _as_input(x):
    return x if isinstance(x, SparseVector) else sp.csr_matrix(x)


def _embed(model, x) -> np.ndarray:
    out = embed_document(model, _as_input(x))
    return out if out.ndim == 1 else out[0]


def _shortlist_embed(model, x) -> np.ndarray:
    out = shortlist_embedding(model.shortlister, model, _as_input(x))
    return out if out.ndim == 1 else out[0]


def _candidates(model, xs, B, counter):
    sl = model.shortlister
    k = sl.num_clusters
    if not 1 <= B <= k:
        raise ValueError(f"beam size must be in [1, {k}], got {B}")
    cscore = np.einsum("kj,j->k", _f64(sl.H), xs)
    top = np.argsort(-cscore, kind="stable")[:B]
    members = [sl.clustering.clusters[m] for m in top]
    ids = np.concatenate(members).astype(np.int64)
    meta = np.repeat(sigmoid(cscore[top]), [len(m) for m in members])
    if counter is not None:
        counter.shortlister_dots += k
        counter.ranker_dots += ids.size
    return ids, meta


def _score_all(model, x, B, W=None, counter=None):
    """Candidate ids and scores for one document given as input vector."""
    if model.shortlister is None:
        raise ValueError("model has no shortlister; train it first")
    xh = _embed(model, x)
    ids, meta = _candidates(model, _shortlist_embed(model, x), B, counter)
    w = W[ids] if W is not None else classifier_rows(model, ids)
    return ids, sigmoid(np.einsum("ij,j->i", w, xh)) * meta


def _rank(ids, scores, top_k) -> Prediction:
    order = np.lexsort((ids, -scores))[:top_k]
    return Prediction(ids[order], scores[order])


def predict(model, x, B: int | None = None, top_k: int = 5, W=None, counter: OpCounter | None = None) -> Prediction:
    """Top-``top_k`` labels for one document (SparseVector or 1-row CSR)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    B = default_beam(model) if B is None else B
    ids, scores = _score_all(model, x, B, W, counter)
    return _rank(ids, scores, top_k)


def predict_batch(model, X, B: int | None = None, top_k: int = 5, W=None, threads: int = 1,
                  chunk: int = 256) -> list[Prediction]:
    """``predict`` for every row of ``X``; documents are independent, so
    running chunks on several threads gives the same output."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    X = sp.csr_matrix(X)
    B = default_beam(model) if B is None else B

    def run(lo):
        block = X[lo:lo + chunk]
        return [_rank(*_score_all(model, block[i], B, W), top_k) for i in range(block.shape[0])]

    starts = list(range(0, X.shape[0], chunk))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return [p for part in parts for p in part]


def predict_ensemble(models, x, B: int | None = None, top_k: int = 5, rule: str = "mean") -> Prediction:
    """Combine instances.  ``mean``: average score, 0 where a label was not
    shortlisted.  ``rank-sum``: average of ``1 - (rank - 1) / L`` over
    instances (0 when not shortlisted), which orders by summed rank with
    unshortlisted labels ranked last."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not models:
        raise ValueError("need at least one model")
    if rule not in ("mean", "rank-sum"):
        raise ValueError(f"unknown combination rule {rule!r}")
    L = models[0].num_labels
    total = np.zeros(L)
    seen = np.zeros(L, dtype=bool)
    for m in models:
        b = default_beam(m) if B is None else B
        ids, scores = _score_all(m, x, b)
        if rule == "mean":
            total[ids] += scores
        else:
            order = np.lexsort((ids, -scores))
            ranks = np.empty(ids.size)
            ranks[order] = np.arange(ids.size)
            total[ids] += 1.0 - ranks / L
        seen[ids] = True
    ids = np.flatnonzero(seen)
    return _rank(ids, total[ids] / len(models), top_k)


def count_ops(model, x=None, B: int | None = None) -> OpCounter:
    """Dot products a prediction costs: K for the shortlister plus the sizes
    of the chosen clusters for the ranker.  Without ``x`` the largest B
    clusters are assumed (a worst case)."""
    sl = model.shortlister
    B = default_beam(model) if B is None else B
    if x is None:
        sizes = np.sort(sl.clustering.sizes())[::-1]
        return OpCounter(sl.num_clusters, int(sizes[:B].sum()))
    counter = OpCounter()
    _candidates(model, _shortlist_embed(model, x), B, counter)
    return counter

"""Ranking metrics, propensities, filtering, quantiles, likelihood diagnostics
and the bag-of-words rescorer.

Predictions are ranked label-id arrays (or ``Prediction`` objects); ground
truth is one array of positive label ids per document.  Documents with no
positives are left out of every average.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .corpus import SparseVector
from .embedding import embed_document
from .inference import Prediction, precompute_classifiers
from .linalg import sigmoid
from .shortlister import shortlist_batch, shortlist_embedding

__all__ = [
    "precision_at_k",
    "ndcg_at_k",
    "psp_at_k",
    "psndcg_at_k",
    "recall_at_k",
    "coverage_at_k",
    "PropensityModel",
    "compute_propensities",
    "EvalReport",
    "evaluate",
    "identity_from_titles",
    "excluded_pairs",
    "filter_predictions",
    "filter_trivial_and_reciprocal",
    "QuantileTable",
    "frequency_bins",
    "quantile_analysis",
    "TheoremDiagnostics",
    "eta_star",
    "theorem_diagnostics",
    "sparse_dot",
    "bow_metadata_rescore",
]


def _ranked(pred) -> np.ndarray:
    if isinstance(pred, Prediction):
        return pred.labels
    return np.asarray(pred, dtype=np.int64).ravel()


def _hits(pred, truth, k) -> np.ndarray:
    top = _ranked(pred)[:k]
    return np.isin(top, np.asarray(truth, dtype=np.int64)).astype(np.float64), top


def _discounts(n) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def precision_at_k(pred, truth, k: int) -> float:
    hits, _ = _hits(pred, truth, k)
    return float(hits.sum() / k)


def ndcg_at_k(pred, truth, k: int, scale_dcg_by_k: bool = False) -> float:
    """DCG over ranks 1..k with ``1/log2(rank+1)`` discounts, divided by the
    ideal DCG of ``min(k, |truth|)`` hits.  ``scale_dcg_by_k`` multiplies the
    DCG by ``1/k``."""
    n_true = len(truth)
    if n_true == 0:
        return 0.0
    hits, _ = _hits(pred, truth, k)
    dcg = float(hits @ _discounts(hits.size))
    if scale_dcg_by_k:
        dcg /= k
    return dcg / float(_discounts(min(k, n_true)).sum())


def psp_at_k(pred, truth, propensity, k: int) -> float:
    hits, top = _hits(pred, truth, k)
    p = np.asarray(propensity, dtype=np.float64)
    return float((hits / p[top]).sum() / k) if top.size else 0.0


def psndcg_at_k(pred, truth, propensity, k: int, scale_dcg_by_k: bool = False) -> float:
    hits, top = _hits(pred, truth, k)
    if top.size == 0:
        return 0.0
    p = np.asarray(propensity, dtype=np.float64)
    dcg = float((hits / p[top]) @ _discounts(top.size))
    if scale_dcg_by_k:
        dcg /= k
    return dcg / float(_discounts(k).sum())


def recall_at_k(pred, truth, k: int) -> float:
    if len(truth) == 0:
        return 0.0
    hits, _ = _hits(pred, truth, k)
    return float(hits.sum() / len(truth))


def coverage_at_k(all_preds, k: int, num_labels: int) -> float:
    """Fraction of the label set appearing in at least one top-k list."""
    seen = [(_ranked(p)[:k]) for p in all_preds]
    if not seen:
        return 0.0
    return float(np.unique(np.concatenate(seen)).size / num_labels)


@dataclass
class PropensityModel:
    A: float
    B: float
    C: float
    propensities: np.ndarray

    def __getitem__(self, l):
        return self.propensities[l]


def compute_propensities(frequencies, num_points: int, A: float = 0.55, B: float = 1.5) -> PropensityModel:
    """``p_l = 1 / (1 + C exp(-A ln(N_l + B)))`` with ``C = (ln N - 1)(B + 1)^A``."""
    freq = np.asarray(frequencies, dtype=np.float64)
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    C = (math.log(num_points) - 1.0) * (B + 1.0) ** A
    p = 1.0 / (1.0 + C * np.exp(-A * np.log(freq + B)))
    return PropensityModel(A, B, C, p)


@dataclass
class EvalReport:
    values: dict[str, float]
    quantiles: QuantileTable | None = None
    num_docs: int = 0

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"num_docs={self.num_docs}"]
        lines += [f"{k}={v:.6f}" for k, v in self.values.items()]
        if self.quantiles is not None:
            for b, c in enumerate(self.quantiles.contributions, start=1):
                lines.append(f"quantile{b}.P@{self.quantiles.k}={c:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(preds, truth, num_labels: int, propensities=None, ks=(1, 3, 5),
             recall_ks=(1, 3, 5, 20), coverage_ks=(1, 3, 5, 20), scale_dcg_by_k: bool = False,
             train_frequencies=None) -> EvalReport:
    """Average every metric over documents with at least one positive."""
    if len(preds) != len(truth):
        raise ValueError("predictions and ground truth differ in length")
    keep = [i for i, t in enumerate(truth) if len(t) > 0]
    values: dict[str, float] = {}
    n = max(len(keep), 1)
    for k in ks:
        values[f"P@{k}"] = sum(precision_at_k(preds[i], truth[i], k) for i in keep) / n
    for k in ks:
        values[f"nDCG@{k}"] = sum(ndcg_at_k(preds[i], truth[i], k, scale_dcg_by_k) for i in keep) / n
    if propensities is not None:
        p = propensities.propensities if isinstance(propensities, PropensityModel) else propensities
        for k in ks:
            values[f"PSP@{k}"] = sum(psp_at_k(preds[i], truth[i], p, k) for i in keep) / n
        for k in ks:
            values[f"PSnDCG@{k}"] = sum(psndcg_at_k(preds[i], truth[i], p, k, scale_dcg_by_k) for i in keep) / n
    for k in recall_ks:
        values[f"R@{k}"] = sum(recall_at_k(preds[i], truth[i], k) for i in keep) / n
    for k in coverage_ks:
        values[f"C@{k}"] = coverage_at_k(preds, k, num_labels)
    quant = None
    if train_frequencies is not None:
        quant = quantile_analysis(preds, truth, train_frequencies)
    return EvalReport(values, quant, len(keep))


# --- trivial / reciprocal filtering --------------------------------------


def identity_from_titles(doc_titles, label_titles) -> np.ndarray:
    """Label id whose title equals each document's title exactly, else -1."""
    index = {}
    for l, t in enumerate(label_titles):
        index.setdefault(t, l)
    return np.array([index.get(t, -1) for t in doc_titles], dtype=np.int64)


def excluded_pairs(test_identity, train_identity=None, train_truth=None) -> list[set]:
    """Per test document, the labels it must not be rewarded for.

    A test document whose identity is label ``a`` loses (1) ``a`` itself and
    (2) every ``b`` such that the training document with identity ``b`` has
    ``a`` among its positives.
    """
    test_identity = np.asarray(test_identity, dtype=np.int64)
    reverse: dict[int, set] = {}
    if train_identity is not None and train_truth is not None:
        for b, labels in zip(np.asarray(train_identity, dtype=np.int64), train_truth):
            if b < 0:
                continue
            for a in np.asarray(labels, dtype=np.int64).tolist():
                reverse.setdefault(a, set()).add(int(b))
    out = []
    for a in test_identity.tolist():
        drop = set()
        if a >= 0:
            drop.add(a)
            drop |= reverse.get(a, set())
        out.append(drop)
    return out


def filter_predictions(preds, drops) -> list:
    """Remove the listed labels; later predictions move up."""
    out = []
    for p, drop in zip(preds, drops):
        labels = _ranked(p)
        keep = np.array([l not in drop for l in labels.tolist()], dtype=bool)
        if isinstance(p, Prediction):
            out.append(Prediction(p.labels[keep], p.scores[keep]))
        else:
            out.append(labels[keep])
    return out


def filter_trivial_and_reciprocal(preds, test_titles=None, label_titles=None, train_titles=None,
                                  train_truth=None, test_identity=None, train_identity=None) -> list:
    """Drop trivial and reciprocal predictions.

    Identities come from exact title matches or from explicit doc -> label
    maps (``test_identity``/``train_identity``, -1 for none).  Without any
    identity information the predictions are returned unchanged with a
    warning.
    """
    if test_identity is None:
        if test_titles is None or label_titles is None:
            warnings.warn("no document/label identity mapping; filtering skipped", stacklevel=2)
            return list(preds)
        test_identity = identity_from_titles(test_titles, label_titles)
    if train_identity is None and train_titles is not None and label_titles is not None:
        train_identity = identity_from_titles(train_titles, label_titles)
    return filter_predictions(preds, excluded_pairs(test_identity, train_identity, train_truth))


# --- frequency quantiles ---------------------------------------------------


@dataclass
class QuantileTable:
    bins: list[np.ndarray]
    contributions: np.ndarray
    mean_frequency: np.ndarray
    k: int = 5


def frequency_bins(frequencies, num_bins: int = 5, by: str = "count") -> list[np.ndarray]:
    """Labels sorted by decreasing training frequency (ties by id), cut into
    ``num_bins`` pieces; the last bin holds the rarest labels.

    ``by="count"`` gives equal numbers of labels per bin, ``by="volume"``
    roughly equal total frequency.
    """
    freq = np.asarray(frequencies, dtype=np.float64)
    order = np.lexsort((np.arange(freq.size), -freq))
    if by == "count":
        return [b.astype(np.int64) for b in np.array_split(order, num_bins)]
    if by != "volume":
        raise ValueError(f"unknown binning {by!r}")
    cum = np.cumsum(freq[order])
    total = cum[-1] if cum.size else 0.0
    if total == 0:
        return [b.astype(np.int64) for b in np.array_split(order, num_bins)]
    cuts = np.searchsorted(cum, total * np.arange(1, num_bins) / num_bins, side="left") + 1
    return [b.astype(np.int64) for b in np.split(order, cuts)]


def quantile_analysis(preds, truth, frequencies, k: int = 5, num_bins: int = 5, by: str = "count") -> QuantileTable:
    """Per-bin share of P@k: hits on that bin's labels / (k * documents)."""
    freq = np.asarray(frequencies, dtype=np.float64)
    bins = frequency_bins(freq, num_bins, by)
    bin_of = np.empty(freq.size, dtype=np.int64)
    for b, members in enumerate(bins):
        bin_of[members] = b
    counts = np.zeros(num_bins)
    keep = [i for i, t in enumerate(truth) if len(t) > 0]
    for i in keep:
        hits, top = _hits(preds[i], truth[i], k)
        np.add.at(counts, bin_of[top[hits > 0]], 1.0)
    contrib = counts / (k * max(len(keep), 1))
    mean_f = np.array([freq[b].mean() if b.size else 0.0 for b in bins])
    return QuantileTable(bins, contrib, mean_f, k)


# --- likelihood decomposition diagnostics --------------------------------


def _xlog_inv(x: float, y: float) -> float:
    # x * ln(1/y) with 0 * ln(1/0) = 0
    if x == 0:
        return 0.0
    return x * -math.log(y)


def eta_star(s: float, r: float, B: int, K: int):
    """``(FPR, TNR, eta)`` from sparsity, recall and the beam fraction."""
    fpr = (1.0 - r) * s
    tnr = (1.0 - s) - B / K + r * s
    denom = fpr + tnr
    eta = fpr / denom if denom > 0 and fpr > 0 else 0.0
    return fpr, tnr, eta


@dataclass
class TheoremDiagnostics:
    s: float
    r: float
    fpr: float
    tnr: float
    tnr_formula: float
    eta: float
    delta: float
    full_loss: float
    shortlist_loss: float
    decomposition: float
    residual: float
    bound: float
    beam: int
    num_clusters: int
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "s": self.s, "r": self.r, "FPR": self.fpr, "TNR": self.tnr,
            "TNR_formula": self.tnr_formula, "eta": self.eta, "Delta": self.delta,
            "L": self.full_loss, "L_tilde": self.shortlist_loss,
            "decomposition": self.decomposition, "residual": self.residual,
            "bound": self.bound, "B": self.beam, "K": self.num_clusters,
        }


def _shortlist_matrix(shortlister, emb, B):
    top, _ = shortlist_batch(shortlister, emb, B)
    n, k = top.shape[0], shortlister.num_clusters
    picked = sp.csr_matrix((np.ones(top.size), top.ravel(), np.arange(0, top.size + 1, B)), shape=(n, k))
    S = sp.csr_matrix(picked @ shortlister.clustering.assignment_matrix())
    S.data[:] = 1.0
    return S


def theorem_diagnostics(model, dataset, B: int, shortlister=None, eta: float | None = None,
                        chunk: int = 1024) -> TheoremDiagnostics:
    """Sparsity, recall, optimal eta and both sides of the decomposition
    ``L = (1/NL) ((NLB/K) L_tilde + Delta)``.

    Pairs outside the shortlist get the default likelihood: ``eta`` for a
    missed positive and ``1 - eta`` for a negative.  ``L`` is accumulated
    pair by pair over the full N x L grid; ``L_tilde`` and ``Delta`` come
    from counts and shortlisted pairs only.
    """
    sl = shortlister if shortlister is not None else model.shortlister
    X = sp.csr_matrix(dataset.features)
    Y = sp.csr_matrix(dataset.labels, dtype=np.float64)
    N, L = Y.shape
    K = sl.num_clusters
    NL = N * L
    if N:
        emb = np.vstack([embed_document(model, X[lo:lo + chunk]) for lo in range(0, N, chunk)])
        s_emb = np.vstack([shortlist_embedding(sl, model, X[lo:lo + chunk]) for lo in range(0, N, chunk)])
    else:
        emb = s_emb = np.zeros((0, model.dim))
    S = _shortlist_matrix(sl, s_emb, B)
    pos = Y.nnz
    pos_hit = int(S.multiply(Y).nnz)
    short = S.nnz
    s = pos / NL
    r = pos_hit / pos if pos else 1.0
    fpr = (pos - pos_hit) / NL
    tnr = (NL - pos - (short - pos_hit)) / NL
    tnr_formula = (1.0 - s) - B / K + r * s
    if eta is None:
        eta = fpr / (fpr + tnr) if fpr > 0 else 0.0
    delta = NL * (_xlog_inv(fpr, eta) + _xlog_inv(tnr, 1.0 - eta))

    W = precompute_classifiers(model)
    miss_pos = -math.log(eta) if eta > 0 else math.inf
    miss_neg = -math.log1p(-eta)
    short_sum = 0.0
    full_sum = 0.0
    for lo in range(0, N, chunk):
        scores = emb[lo:lo + chunk] @ W.T
        y = np.where(Y[lo:lo + chunk].toarray() > 0, 1.0, -1.0)
        in_s = S[lo:lo + chunk].toarray() > 0
        ell = np.logaddexp(0.0, -y * scores)
        short_sum += float(ell[in_s].sum())
        # augmented likelihood on every pair of the grid
        aug = np.where(in_s, ell, np.where(y > 0, miss_pos, miss_neg))
        full_sum += float(aug.sum()) if np.isfinite(aug).all() else math.inf
    shortlist_loss = K / (NL * B) * short_sum
    full_loss = full_sum / NL
    decomposition = ((NL * B / K) * shortlist_loss + delta) / NL
    residual = abs(full_loss - decomposition) if np.isfinite(full_loss) else 0.0
    t = s * (1.0 - r)
    bound = t * -math.log(t) if t > 0 else 0.0
    return TheoremDiagnostics(s, r, fpr, tnr, tnr_formula, eta, delta, full_loss, shortlist_loss,
                              decomposition, residual, bound, B, K,
                              {"positives": pos, "positives_shortlisted": pos_hit, "shortlisted_pairs": short})


# --- bag-of-words rescoring -------------------------------------------------


def sparse_dot(a: SparseVector, b: SparseVector) -> float:
    """Inner product of two sorted sparse vectors by merging their id lists."""
    if a.nnz == 0 or b.nnz == 0:
        return 0.0
    if a.nnz > b.nnz:
        a, b = b, a
    pos = np.searchsorted(b.indices, a.indices)
    pos = np.minimum(pos, b.nnz - 1)
    match = b.indices[pos] == a.indices
    return float(a.weights[match] @ b.weights[pos[match]])


def _row_vector(m: sp.csr_matrix, i: int) -> SparseVector:
    lo, hi = m.indptr[i], m.indptr[i + 1]
    return SparseVector(m.indices[lo:hi].astype(np.int64), m.data[lo:hi].astype(np.float64))


def bow_metadata_rescore(preds, X, Z, alpha: float) -> list[Prediction]:
    """``alpha * s + (1 - alpha) * sigmoid(<x_i, z_l>)`` for every predicted
    (i, l), then re-ranked (ties by label id)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    X = sp.csr_matrix(X)
    Z = sp.csr_matrix(Z)
    X.sort_indices()
    Z.sort_indices()
    out = []
    for i, p in enumerate(preds):
        x = _row_vector(X, i)
        sims = np.array([sparse_dot(x, _row_vector(Z, l)) for l in p.labels.tolist()])
        new = alpha * p.scores + (1.0 - alpha) * sigmoid(sims)
        order = np.lexsort((p.labels, -new))
        out.append(Prediction(p.labels[order], new[order]))
    return out

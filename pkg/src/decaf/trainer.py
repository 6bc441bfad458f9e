"""The four-module training pipeline.

Module I learns token embeddings and both text blocks on a meta problem over
sparse-centroid clusters; Module II re-clusters on learned embeddings,
fine-tunes with refinement vectors on the meta-classifiers and caches
training shortlists; Module III re-initialises the classifier parts; Module
IV trains the label classifiers on the cached shortlists.

Gradients are written out by hand.  Each ``*_loss_and_grads`` function is a
pure function of the model, a mini-batch and its dropout masks, which is what
the gradient checks exercise.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .clustering import LabelClustering, centroids_dense, centroids_sparse, hierarchical_cluster
from .embedding import (
    CombinationBlock,
    EmbeddingBlock,
    block_backward,
    block_forward,
    combine,
    combine_backward,
    embed_document,
    init_token_embeddings,
)
from .errors import NumericalError
from .linalg import (
    AdamState,
    adam_step,
    derive_seed,
    dropout_mask,
    he_normal,
    make_rng,
    relu,
    sigmoid,
    spectral_normalize,
)
from .model import Model, load_model, save_model
from .shortlister import (
    Shortlister,
    build_meta_problem,
    meta_text_embedding,
    select_beam,
    shortlist_batch,
    shortlist_embedding,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "ABLATIONS",
    "ShortlistCache",
    "Masks",
    "logistic_loss_and_grad",
    "draw_masks",
    "module1_loss_and_grads",
    "module2_loss_and_grads",
    "module4_loss_and_grads",
    "train_module1",
    "train_module2",
    "init_module3",
    "train_module4",
    "train_pipeline",
    "train_ensemble",
    "instance_seed",
    "document_embeddings",
    "shortlist_embeddings",
    "build_shortlist_cache",
    "training_loss",
    "get_param",
    "set_param",
    "save_checkpoint",
    "load_checkpoint",
]

ABLATIONS = ("none", "no-init", "z1-only", "z2-only", "lite")


@dataclass
class TrainConfig:
    """Training hyperparameters."""

    dim: int = 300
    num_clusters: int = 2**15
    beam: int | None = None
    target_recall: float = 0.85
    batch_size: int = 255
    epochs_module1: int = 20
    lr_module1: float = 0.01
    epochs_module2: int = 10
    lr_module2: float = 0.008
    epochs_module4: int = 20
    lr_module4: float = 0.008
    decay_factor: float = 0.5
    dropout_module1: float = 0.5
    dropout: float = 0.2
    spectral_iters: int = 1
    seed: int = 0
    ensemble_size: int = 3
    ablation: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        k = self.num_clusters
        if k < 1 or k & (k - 1):
            raise ValueError(f"num_clusters must be a power of two, got {k}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.beam is not None and not 1 <= self.beam <= k:
            raise ValueError(f"beam must be in [1, {k}]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        for rate in (self.dropout, self.dropout_module1):
            if not 0 <= rate < 1:
                raise ValueError("dropout rates must be in [0, 1)")

    @property
    def levels(self) -> int:
        return self.num_clusters.bit_length() - 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: TrainConfig | None = None) -> TrainConfig:
        fields = {f.name: f for f in dataclasses.fields(cls)}
        current = (base or cls()).to_dict()
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in fields:
                raise ValueError(f"unknown config key {key!r}")
            current[name] = _coerce(name, raw, current[name])
        return cls(**current)


def _coerce(name, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if name == "beam":
        return None if raw in ("", "none", "None", "auto") else int(raw)
    if name == "ablation":
        return raw
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw, 0)
    if isinstance(default, float):
        return float(raw)
    return raw


def instance_seed(seed: int, index: int) -> int:
    """Seed of ensemble instance ``index`` (Modules II onwards)."""
    return derive_seed(seed, 1000 + index)


@dataclass
class ShortlistCache:
    """Per-document training shortlists as an N x L 0/1 matrix."""

    matrix: sp.csr_matrix
    beam: int

    def rows(self, idx) -> sp.csr_matrix:
        return self.matrix[idx]

    def labels_of(self, i: int) -> np.ndarray:
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi].astype(np.int64)


@dataclass
class Masks:
    doc_inner: np.ndarray | None = None
    doc_outer: np.ndarray | None = None
    label: np.ndarray | None = None


def draw_masks(rng, rate: float, n_docs: int, n_label_rows: int, dim: int) -> Masks:
    """Dropout masks in a fixed draw order: doc inner, doc outer, label rows."""
    return Masks(
        dropout_mask((n_docs, dim), rate, rng),
        dropout_mask((n_docs, dim), rate, rng),
        dropout_mask((n_label_rows, dim), rate, rng),
    )


def logistic_loss_and_grad(score, y):
    """``ln(1 + exp(-y * score))`` and its derivative ``-y * sigmoid(-y * score)``."""
    score = np.asarray(score, dtype=np.float64)
    margin = -np.asarray(y, dtype=np.float64) * score
    loss = np.logaddexp(0.0, margin)
    grad = -np.asarray(y, dtype=np.float64) * sigmoid(margin)
    return loss, grad


_PATHS = {
    "E": ("E",),
    "doc.R": ("doc_block", "R"),
    "doc.alpha": ("doc_block", "alpha"),
    "doc.beta": ("doc_block", "beta"),
    "label.R": ("label_block", "R"),
    "label.alpha": ("label_block", "alpha"),
    "label.beta": ("label_block", "beta"),
    "clf.alpha": ("classifier_gates", "alpha"),
    "clf.beta": ("classifier_gates", "beta"),
    "refinement": ("refinement",),
    "P.alpha": ("shortlister", "gates", "alpha"),
    "P.beta": ("shortlister", "gates", "beta"),
    "P.refinement": ("shortlister", "refinement"),
}
# parameters whose gradients arrive as (rows, values) and get lazy Adam updates
SPARSE_PARAMS = frozenset({"E", "refinement"})


def get_param(model: Model, name: str) -> np.ndarray:
    obj = model
    for attr in _PATHS[name]:
        obj = getattr(obj, attr)
    return obj


def set_param(model: Model, name: str, value: np.ndarray) -> None:
    *parents, last = _PATHS[name]
    obj = model
    for attr in parents:
        obj = getattr(obj, attr)
    setattr(obj, last, value)


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _doc_forward(model, X, masks):
    r0 = np.asarray(X @ _f64(model.E))
    out = block_forward(model.doc_block, r0, masks.doc_inner)
    xh = relu(out)
    if masks.doc_outer is not None:
        xh = xh * masks.doc_outer
    return r0, out, xh


def _doc_backward(model, r0, out, d_xh, masks):
    d_out = d_xh * (out > 0)
    if masks.doc_outer is not None:
        d_out = d_out * masks.doc_outer
    return block_backward(model.doc_block, r0, d_out, masks.doc_inner)


def _embedding_grad(parts):
    """Sum of ``X^T dR0`` over (sparse input, r0 gradient) parts, touched rows only."""
    mats = [sp.csr_matrix(x) for x, _ in parts]
    X = sp.vstack(mats, format="csr")
    G = np.vstack([g for _, g in parts])
    rows = np.unique(X.indices)
    if rows.size == 0:
        return rows, np.zeros((0, G.shape[1]))
    return rows, np.asarray(X[:, rows].T @ G)


def _logistic_matrix(S, Y):
    # Y is +/-1; returns elementwise loss and d loss / d S
    margin = -Y * S
    return np.logaddexp(0.0, margin), -Y * sigmoid(margin)


def _signs(indicator) -> np.ndarray:
    dense = np.asarray(sp.csr_matrix(indicator).toarray() > 0)
    return np.where(dense, 1.0, -1.0)


def _block_grads(prefix, g, out):
    out[f"{prefix}.R"] = g.R
    out[f"{prefix}.alpha"] = g.alpha
    out[f"{prefix}.beta"] = g.beta


def module1_loss_and_grads(model: Model, X, meta_labels, meta_texts, masks: Masks | None = None):
    """Full one-vs-all meta loss with ``h_m = E_L(u_m)``."""
    masks = masks or Masks()
    r0x, out_x, xh = _doc_forward(model, X, masks)
    r0u = np.asarray(meta_texts @ _f64(model.E))
    H = block_forward(model.label_block, r0u, masks.label)
    S = xh @ H.T
    Y = _signs(meta_labels)
    ell, dl = _logistic_matrix(S, Y)
    loss = ell.mean()
    dS = dl / ell.size
    gd = _doc_backward(model, r0x, out_x, dS @ H, masks)
    gl = block_backward(model.label_block, r0u, dS.T @ xh, masks.label)
    grads = {}
    _block_grads("doc", gd, grads)
    _block_grads("label", gl, grads)
    grads["E"] = _embedding_grad([(X, gd.r0), (meta_texts, gl.r0)])
    return float(loss), grads


def module2_loss_and_grads(model: Model, X, meta_labels, clustering: LabelClustering,
                           masks: Masks | None = None, assignment=None):
    """Meta loss with ``h_m = sigmoid(a_P) * u2_m + sigmoid(b_P) * sum_l E_L(z_l)``."""
    masks = masks or Masks()
    sl = model.shortlister
    A = clustering.assignment_matrix() if assignment is None else assignment
    Z = model.label_texts
    r0x, out_x, xh = _doc_forward(model, X, masks)
    r0z = np.asarray(Z @ _f64(model.E))
    z1 = block_forward(model.label_block, r0z, masks.label)
    u1 = np.asarray(A @ z1)
    u2 = _f64(sl.refinement)
    H = combine(sl.gates, u2, u1)
    S = xh @ H.T
    ell, dl = _logistic_matrix(S, _signs(meta_labels))
    loss = ell.mean()
    dS = dl / ell.size
    dH = dS.T @ xh
    d_pa, d_pb, d_u2, d_u1 = combine_backward(sl.gates, u2, u1, dH)
    gd = _doc_backward(model, r0x, out_x, dS @ H, masks)
    gl = block_backward(model.label_block, r0z, np.asarray(A.T @ d_u1), masks.label)
    grads = {"P.alpha": d_pa, "P.beta": d_pb, "P.refinement": d_u2}
    _block_grads("doc", gd, grads)
    _block_grads("label", gl, grads)
    grads["E"] = _embedding_grad([(X, gd.r0), (Z, gl.r0)])
    return float(loss), grads


def module4_loss_and_grads(model: Model, X, labels, shortlists, masks: Masks | None = None):
    """Mean logistic loss over the (document, label) pairs present in ``shortlists``.

    ``labels`` and ``shortlists`` are the batch rows of the N x L positive
    indicator and of the shortlist cache.
    """
    masks = masks or Masks()
    shortlists = sp.csr_matrix(shortlists)
    ids = np.unique(shortlists.indices)
    present = shortlists[:, ids].toarray() > 0
    Y = _signs(sp.csr_matrix(labels)[:, ids])
    r0x, out_x, xh = _doc_forward(model, X, masks)
    mode = model.classifier_mode
    Zs = model.label_texts[ids]
    z2 = _f64(model.refinement[ids]) if model.refinement is not None else np.zeros((ids.size, model.dim))
    if mode != "z2":
        r0z = np.asarray(Zs @ _f64(model.E))
        z1 = block_forward(model.label_block, r0z, masks.label)
    if mode == "full":
        W = combine(model.classifier_gates, z1, z2)
    elif mode == "z1":
        W = z1
    else:
        W = sigmoid(model.classifier_gates.beta) * z2
    S = xh @ W.T
    ell, dl = _logistic_matrix(S, Y)
    npairs = max(int(present.sum()), 1)
    loss = float((ell * present).sum() / npairs)
    dS = dl * present / npairs
    dW = dS.T @ xh
    gd = _doc_backward(model, r0x, out_x, dS @ W, masks)
    grads = {}
    _block_grads("doc", gd, grads)
    parts = [(X, gd.r0)]
    if mode == "full":
        d_a, d_b, d_z1, d_z2 = combine_backward(model.classifier_gates, z1, z2, dW)
        grads["clf.alpha"], grads["clf.beta"] = d_a, d_b
        grads["refinement"] = (ids, d_z2)
    elif mode == "z1":
        d_z1 = dW
    else:
        sb = sigmoid(model.classifier_gates.beta)
        grads["clf.beta"] = (dW * z2).sum(axis=0) * sb * (1 - sb)
        grads["refinement"] = (ids, dW * sb)
    if mode != "z2":
        gl = block_backward(model.label_block, r0z, d_z1, masks.label)
        _block_grads("label", gl, grads)
        parts.append((Zs, gl.r0))
    grads["E"] = _embedding_grad(parts)
    return loss, grads


def _spectral(model, names, config, seed, module_id):
    for prefix, key in (("doc", "doc_block"), ("label", "label_block")):
        if f"{prefix}.R" not in names:
            continue
        blk: EmbeddingBlock = getattr(model, key)
        u = blk.u
        if u is None:
            u = make_rng(seed, module_id, 7, 0 if prefix == "doc" else 1).normal(size=blk.dim)
        R, u = spectral_normalize(blk.R, iters=config.spectral_iters, u=u)
        blk.R = R
        blk.u = np.asarray(u, dtype=np.float32)


def _optimize(model: Model, names, n_docs, epochs, lr0, config: TrainConfig, seed, module_id,
              step: Callable, history: list | None, label: str):
    states = {n: AdamState.zeros_like(get_param(model, n), lr=lr0) for n in names}
    interval = max(math.ceil(epochs / 2), 1)
    M = config.batch_size
    for epoch in range(epochs):
        lr = lr0 * config.decay_factor ** (epoch // interval)
        rng = make_rng(seed, module_id, epoch)
        perm = rng.permutation(n_docs)
        total, batches = 0.0, 0
        for b, lo in enumerate(range(0, n_docs, M)):
            batch = perm[lo:lo + M]
            loss, grads = step(batch, rng)
            if not np.isfinite(loss):
                raise NumericalError(f"{label}: non-finite loss at epoch {epoch}, batch {b}")
            for n in names:
                state = replace(states[n], lr=lr)
                param = get_param(model, n)
                try:
                    if n in SPARSE_PARAMS:
                        rows, g = grads[n]
                        new, states[n] = adam_step(param, g, state, rows=rows)
                    else:
                        new, states[n] = adam_step(param, grads[n], state)
                except NumericalError as exc:
                    raise NumericalError(f"{label}: {exc} ({n}, epoch {epoch}, batch {b})") from None
                set_param(model, n, new)
            _spectral(model, names, config, seed, module_id)
            total += loss
            batches += 1
        mean = total / max(batches, 1)
        if history is not None:
            history.append(mean)
        log.debug("%s epoch %d lr %.5g loss %.6f", label, epoch, lr, mean)
    return model


def _block_names(prefix):
    return [f"{prefix}.R", f"{prefix}.alpha", f"{prefix}.beta"]


def document_embeddings(model: Model, X, chunk: int = 4096) -> np.ndarray:
    X = sp.csr_matrix(X)
    if X.shape[0] == 0:
        return np.zeros((0, model.dim))
    return np.vstack([embed_document(model, X[lo:lo + chunk]) for lo in range(0, X.shape[0], chunk)])


def shortlist_embeddings(model: Model, X, shortlister: Shortlister | None = None, chunk: int = 4096) -> np.ndarray:
    """Embeddings the shortlister ranks clusters with (its frozen encoder if any)."""
    sl = model.shortlister if shortlister is None else shortlister
    X = sp.csr_matrix(X)
    if X.shape[0] == 0:
        return np.zeros((0, model.dim))
    return np.vstack([shortlist_embedding(sl, model, X[lo:lo + chunk]) for lo in range(0, X.shape[0], chunk)])


def _new_model(dataset, config: TrainConfig, seed) -> Model:
    D = config.dim
    if dataset.label_texts is None:
        raise ValueError("training requires label texts")
    return Model(
        E=init_token_embeddings(dataset.num_tokens, D, make_rng(seed, 1, 0)),
        doc_block=EmbeddingBlock.identity(D, rng=make_rng(seed, 1, 1)),
        label_block=EmbeddingBlock.identity(D, rng=make_rng(seed, 1, 2)),
        classifier_gates=CombinationBlock.zeros(D),
        label_texts=sp.csr_matrix(dataset.label_texts, dtype=np.float32),
        config=config.to_dict(),
    )


def train_module1(dataset, config: TrainConfig, history: list | None = None):
    """Meta-training on sparse-centroid clusters; returns ``(model, clustering)``."""
    t0 = time.perf_counter()
    seed = config.seed
    model = _new_model(dataset, config, seed)
    clustering = hierarchical_cluster(centroids_sparse(dataset), config.levels, seed=derive_seed(seed, 1, 3))
    meta = build_meta_problem(dataset, clustering)
    U = meta.meta_texts
    X, Y = dataset.features, meta.meta_labels
    K, D = clustering.num_clusters, config.dim

    def step(batch, rng):
        masks = draw_masks(rng, config.dropout_module1, batch.size, K, D)
        return module1_loss_and_grads(model, X[batch], Y[batch], U, masks)

    names = ["E"] + _block_names("doc") + _block_names("label")
    _optimize(model, names, dataset.num_points, config.epochs_module1, config.lr_module1,
              config, seed, 1, step, history, "module1")
    log.info("module1 done in %.2fs (K=%d)", time.perf_counter() - t0, K)
    return model, clustering


def build_shortlist_cache(shortlister: Shortlister, embeddings, labels, B: int,
                          include_positives: bool = True) -> ShortlistCache:
    top, _ = shortlist_batch(shortlister, embeddings, B)
    n, k = top.shape[0], shortlister.num_clusters
    picked = sp.csr_matrix(
        (np.ones(top.size), top.ravel(), np.arange(0, top.size + 1, B)), shape=(n, k)
    )
    mat = sp.csr_matrix(picked @ shortlister.clustering.assignment_matrix())
    if include_positives:
        mat = mat + sp.csr_matrix(labels)
    mat = sp.csr_matrix(mat)
    mat.data[:] = 1.0
    mat.sort_indices()
    return ShortlistCache(mat, B)


def materialize_shortlister(model: Model, clustering, refinement=None, gates=None,
                            freeze_encoder: bool = True) -> Shortlister:
    """Freeze the meta-classifiers of the current model into ``H``, together
    with a copy of the document encoder they were trained against."""
    u1 = meta_text_embedding(model, model.label_texts, clustering)
    if refinement is None:
        H = u1
    else:
        H = combine(gates, refinement, u1)
    enc_E = model.E.copy() if freeze_encoder else None
    enc_blk = model.doc_block.astype(model.doc_block.R.dtype) if freeze_encoder else None
    return Shortlister(clustering, np.asarray(H, dtype=np.float32), refinement, gates, enc_E, enc_blk)


def train_module2(model: Model, dataset, config: TrainConfig, seed: int | None = None,
                  history: list | None = None):
    """Re-cluster on learned embeddings, fine-tune, pick B and cache shortlists.

    Returns ``(model, shortlister, cache)``.
    """
    t0 = time.perf_counter()
    seed = config.seed if seed is None else seed
    model = model.copy()
    clustering = hierarchical_cluster(centroids_dense(dataset, model.E), config.levels,
                                      seed=derive_seed(seed, 2, 3))
    meta = build_meta_problem(dataset, clustering)
    A = clustering.assignment_matrix()
    D, L = config.dim, dataset.num_labels
    u1 = meta_text_embedding(model, model.label_texts, clustering)
    model.shortlister = Shortlister(
        clustering, np.asarray(u1, dtype=np.float32), np.asarray(u1, dtype=np.float32),
        CombinationBlock.zeros(D),
    )
    X, Y = dataset.features, meta.meta_labels

    def step(batch, rng):
        masks = draw_masks(rng, config.dropout, batch.size, L, D)
        return module2_loss_and_grads(model, X[batch], Y[batch], clustering, masks, assignment=A)

    names = _block_names("doc") + _block_names("label") + ["P.alpha", "P.beta", "P.refinement"]
    if config.ablation != "lite":
        names = ["E"] + names
    _optimize(model, names, dataset.num_points, config.epochs_module2, config.lr_module2,
              config, seed, 2, step, history, "module2")
    sl = model.shortlister
    shortlister = materialize_shortlister(model, clustering, sl.refinement, sl.gates)
    model.shortlister = shortlister
    emb = document_embeddings(model, X)
    if config.beam is not None:
        B = config.beam
    else:
        B = select_beam(shortlister, emb, dataset.labels, config.target_recall)
    cache = build_shortlist_cache(shortlister, emb, dataset.labels, B)
    model.config = {**model.config, "selected_beam": int(B)}
    log.info("module2 done in %.2fs (B=%d, mean shortlist %.1f)", time.perf_counter() - t0, B,
             cache.matrix.nnz / max(dataset.num_points, 1))
    return model, shortlister, cache


def init_module3(model: Model, ablation: str = "none", seed: int = 0) -> Model:
    """Identity residuals, zero classifier gates, refinement ``E z_l``."""
    model = model.copy()
    D = model.dim
    model.doc_block.R = np.eye(D, dtype=np.float32)
    model.label_block.R = np.eye(D, dtype=np.float32)
    model.classifier_gates = CombinationBlock.zeros(D)
    L = model.num_labels
    if ablation in ("no-init", "z2-only"):
        ref = he_normal(make_rng(seed, 3, 0), (L, D), D)
    elif ablation == "z1-only":
        ref = np.zeros((L, D))
    else:
        ref = np.asarray(model.label_texts @ _f64(model.E))
    model.refinement = np.asarray(ref, dtype=np.float32)
    model.classifier_mode = {"z1-only": "z1", "z2-only": "z2"}.get(ablation, "full")
    return model


def train_module4(model: Model, dataset, cache: ShortlistCache, config: TrainConfig,
                  seed: int | None = None, history: list | None = None) -> Model:
    t0 = time.perf_counter()
    seed = config.seed if seed is None else seed
    model = model.copy()
    X, Y, C = dataset.features, dataset.labels, cache.matrix
    D = config.dim
    mode = model.classifier_mode

    def step(batch, rng):
        rows = C[batch]
        n_lab = np.unique(rows.indices).size
        masks = draw_masks(rng, config.dropout, batch.size, n_lab, D)
        return module4_loss_and_grads(model, X[batch], Y[batch], rows, masks)

    names = _block_names("doc")
    if mode != "z2":
        names += _block_names("label")
    names += {"full": ["clf.alpha", "clf.beta", "refinement"], "z1": [],
              "z2": ["clf.beta", "refinement"]}[mode]
    if config.ablation != "lite":
        names = ["E"] + names
    _optimize(model, names, dataset.num_points, config.epochs_module4, config.lr_module4,
              config, seed, 4, step, history, "module4")
    log.info("module4 done in %.2fs", time.perf_counter() - t0)
    return model


def training_loss(model: Model, dataset, shortlists=None) -> float:
    """Mean logistic loss (no dropout) over shortlisted pairs, or all pairs."""
    if shortlists is None:
        shortlists = sp.csr_matrix(np.ones((dataset.num_points, dataset.num_labels)))
    loss, _ = module4_loss_and_grads(model, dataset.features, dataset.labels, shortlists)
    return loss


def _final_config(config: TrainConfig, model: Model) -> dict:
    return {**config.to_dict(), "selected_beam": model.config.get("selected_beam", config.beam)}


def _run_instance(base: Model, dataset, config: TrainConfig, seed: int, checkpoint_dir=None,
                  logs=None):
    logs = logs if logs is not None else {}
    model, shortlister, cache = train_module2(base, dataset, config, seed, logs.setdefault("module2", []))
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/module2.ckpt", 2, model, cache=cache)
    model = init_module3(model, config.ablation, seed)
    model = train_module4(model, dataset, cache, config, seed, logs.setdefault("module4", []))
    model.config = _final_config(config, model)
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/module4.ckpt", 4, model)
    return model


def train_pipeline(dataset, config: TrainConfig, checkpoint_dir=None, logs: dict | None = None) -> Model:
    """Single instance; equivalent to ``train_ensemble`` with one instance."""
    return train_ensemble(dataset, replace(config, ensemble_size=1), checkpoint_dir, logs)[0]


def train_ensemble(dataset, config: TrainConfig, checkpoint_dir=None, logs: dict | None = None) -> list[Model]:
    """Module I once, then Modules II-IV per instance with derived seeds."""
    logs = logs if logs is not None else {}
    base, clustering = train_module1(dataset, config, logs.setdefault("module1", []))
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/module1.ckpt", 1, base, clustering=clustering)
    models = []
    for j in range(config.ensemble_size):
        sub = None
        if checkpoint_dir is not None:
            sub = checkpoint_dir if config.ensemble_size == 1 else f"{checkpoint_dir}/instance{j}"
            os.makedirs(sub, exist_ok=True)
        models.append(_run_instance(base, dataset, config, instance_seed(config.seed, j), sub,
                                    logs.setdefault(f"instance{j}", {})))
    return models


def resume_from_checkpoint(path, dataset, config: TrainConfig, instance: int = 0,
                           checkpoint_dir=None, logs=None) -> Model:
    """Re-enter the pipeline after the module stored in ``path``."""
    stage, model, extras = load_checkpoint(path)
    seed = instance_seed(config.seed, instance)
    logs = logs if logs is not None else {}
    if stage == 1:
        return _run_instance(model, dataset, config, seed, checkpoint_dir, logs)
    if stage == 2:
        cache = extras["cache"]
        model = init_module3(model, config.ablation, seed)
        model = train_module4(model, dataset, cache, config, seed, logs.setdefault("module4", []))
        model.config = _final_config(config, model)
        if checkpoint_dir is not None:
            save_checkpoint(f"{checkpoint_dir}/module4.ckpt", 4, model)
        return model
    return model


def save_checkpoint(path, stage: int, model: Model, clustering: LabelClustering | None = None,
                    cache: ShortlistCache | None = None) -> None:
    meta = {"stage": stage}
    arrays = {}
    if clustering is not None:
        arrays["clustering.sizes"] = clustering.sizes()
        arrays["clustering.members"] = np.concatenate(clustering.clusters)
        meta["clustering_levels"] = clustering.levels
    if cache is not None:
        arrays["cache.indptr"] = cache.matrix.indptr.astype(np.int64)
        arrays["cache.indices"] = cache.matrix.indices
        meta["beam"] = cache.beam
    save_model(model, path, extra_meta=meta, extra_arrays=arrays)


def load_checkpoint(path):
    """Returns ``(stage, model, extras)`` where extras may hold clustering / cache."""
    model, manifest, arrays = load_model(path, with_extras=True)
    extras = {}
    if "clustering.sizes" in arrays:
        sizes = arrays["clustering.sizes"]
        members = arrays["clustering.members"].astype(np.int64)
        extras["clustering"] = LabelClustering(
            list(np.split(members, np.cumsum(sizes)[:-1])), manifest.get("clustering_levels", 0),
            model.num_labels)
    if "cache.indptr" in arrays:
        indptr = arrays["cache.indptr"]
        indices = arrays["cache.indices"].astype(np.int64)
        mat = sp.csr_matrix((np.ones(indices.size), indices, indptr),
                            shape=(indptr.size - 1, model.num_labels))
        extras["cache"] = ShortlistCache(mat, int(manifest.get("beam", 0)))
    return int(manifest.get("stage", 4)), model, extras

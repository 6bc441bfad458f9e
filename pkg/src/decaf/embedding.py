"""Text embedding block and combination block with closed-form gradients.

The embedding block maps a bag-of-tokens vector ``r`` to::

    r0  = E^T r
    out = sigmoid(alpha) * r0 + sigmoid(beta) * (R @ dropout(relu(r0)))

Token embeddings are stored as a V x D matrix (row ``t`` is the embedding of
token ``t``).  Every function accepts a single vector or a batch of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .corpus import SparseVector
from .linalg import he_normal, relu, sigmoid

__all__ = [
    "EmbeddingBlock",
    "CombinationBlock",
    "BlockGrads",
    "init_token_embeddings",
    "bag_embed",
    "bag_embed_backward",
    "block_forward",
    "block_backward",
    "embed_document",
    "embed_label",
    "combine",
    "combine_backward",
]


@dataclass
class EmbeddingBlock:
    R: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    # persisted power-iteration vector for spectral normalisation of R
    u: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def identity(cls, dim: int, dtype=np.float32, rng=None) -> EmbeddingBlock:
        u = None if rng is None else rng.normal(size=dim)
        return cls(
            np.eye(dim, dtype=dtype),
            np.zeros(dim, dtype=dtype),
            np.zeros(dim, dtype=dtype),
            u,
        )

    @property
    def dim(self) -> int:
        return self.R.shape[0]

    def astype(self, dtype) -> EmbeddingBlock:
        return EmbeddingBlock(
            self.R.astype(dtype), self.alpha.astype(dtype), self.beta.astype(dtype),
            None if self.u is None else self.u.copy(),
        )


@dataclass
class CombinationBlock:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, dim: int, dtype=np.float32) -> CombinationBlock:
        return cls(np.zeros(dim, dtype=dtype), np.zeros(dim, dtype=dtype))

    def astype(self, dtype) -> CombinationBlock:
        return CombinationBlock(self.alpha.astype(dtype), self.beta.astype(dtype))


@dataclass
class BlockGrads:
    R: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    r0: np.ndarray


def init_token_embeddings(num_tokens: int, dim: int, rng, dtype=np.float32) -> np.ndarray:
    return he_normal(rng, (num_tokens, dim), dim).astype(dtype)


def bag_embed(E: np.ndarray, r) -> np.ndarray:
    """``r0 = sum_t weight_t * e_t``; a CSR batch gives one row per document."""
    if isinstance(r, SparseVector):
        if r.nnz == 0:
            return np.zeros(E.shape[1])
        return r.weights @ np.asarray(E[r.indices], dtype=np.float64)
    if sp.issparse(r):
        return np.asarray(r @ np.asarray(E, dtype=np.float64))
    raise TypeError("bag_embed expects a SparseVector or a sparse matrix")


def bag_embed_backward(r: sp.csr_matrix, grad_r0: np.ndarray):
    """Gradient w.r.t. the touched rows of E: returns ``(rows, grads)``."""
    r = sp.csr_matrix(r)
    rows = np.unique(r.indices)
    if rows.size == 0:
        return rows, np.zeros((0, grad_r0.shape[1]))
    sub = r[:, rows]
    return rows, np.asarray(sub.T @ grad_r0)


def _gates(blk):
    return sigmoid(blk.alpha), sigmoid(blk.beta)


def block_forward(blk: EmbeddingBlock, r0: np.ndarray, mask=None) -> np.ndarray:
    r0 = np.asarray(r0, dtype=np.float64)
    sa, sb = _gates(blk)
    h = relu(r0)
    if mask is not None:
        h = h * mask
    return sa * r0 + sb * (h @ np.asarray(blk.R, dtype=np.float64).T)


def block_backward(blk: EmbeddingBlock, r0: np.ndarray, upstream: np.ndarray, mask=None) -> BlockGrads:
    """Gradients of ``<upstream, block_forward(blk, r0)>``.

    The ReLU subgradient at 0 is taken as 0.
    """
    one = np.ndim(r0) == 1
    r0 = np.atleast_2d(np.asarray(r0, dtype=np.float64))
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    R = np.asarray(blk.R, dtype=np.float64)
    sa, sb = _gates(blk)
    active = r0 > 0
    h = np.where(active, r0, 0.0)
    if mask is not None:
        mask = np.atleast_2d(mask)
        h = h * mask
    res = h @ R.T
    g = up * sb
    d_alpha = (up * r0).sum(axis=0) * sa * (1.0 - sa)
    d_beta = (up * res).sum(axis=0) * sb * (1.0 - sb)
    d_R = g.T @ h
    d_h = g @ R
    if mask is not None:
        d_h = d_h * mask
    d_r0 = up * sa + np.where(active, d_h, 0.0)
    return BlockGrads(d_R, d_alpha, d_beta, d_r0[0] if one else d_r0)


def embed_document(model, x, mask_inner=None, mask_outer=None) -> np.ndarray:
    """``relu(E_D(x))``; masks are only passed during training."""
    out = relu(block_forward(model.doc_block, bag_embed(model.E, x), mask_inner))
    if mask_outer is not None:
        out = out * mask_outer
    return out


def embed_label(model, z, mask=None) -> np.ndarray:
    """``E_L(z)`` with no outer ReLU, so components may be negative."""
    return block_forward(model.label_block, bag_embed(model.E, z), mask)


def combine(cb: CombinationBlock, a, b) -> np.ndarray:
    return sigmoid(cb.alpha) * np.asarray(a, dtype=np.float64) + sigmoid(cb.beta) * np.asarray(b, dtype=np.float64)


def combine_backward(cb: CombinationBlock, a, b, upstream):
    """Returns ``(d_alpha, d_beta, d_a, d_b)``; gate grads are summed over rows."""
    sa, sb = sigmoid(cb.alpha), sigmoid(cb.beta)
    up = np.asarray(upstream, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ua, ub = up * a, up * b
    if up.ndim == 2:
        ua, ub = ua.sum(axis=0), ub.sum(axis=0)
    return ua * sa * (1 - sa), ub * sb * (1 - sb), up * sa, up * sb


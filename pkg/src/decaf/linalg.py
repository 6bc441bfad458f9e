"""Numeric substrate: activations, Adam, spectral normalisation, dropout, RNG.

Parameters are stored as float32; all kernels here compute in float64 and
the caller decides the storage dtype of the result.

Randomness comes from numpy's Philox counter-based generator keyed by a
``SeedSequence``.  A stream is identified by ``(seed, *key)`` so per-node,
per-epoch or per-instance streams do not depend on the order in which they
are created.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import NumericalError

__all__ = [
    "sigmoid",
    "sigmoid_grad",
    "relu",
    "make_rng",
    "derive_seed",
    "he_normal",
    "AdamState",
    "adam_step",
    "spectral_normalize",
    "dropout_mask",
]


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def relu(x):
    return np.maximum(np.asarray(x), 0.0)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox stream for ``(seed, *key)``; identical across platforms."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def he_normal(rng: np.random.Generator, shape, dim: int) -> np.ndarray:
    """Zero-mean Gaussian with std sqrt(2 / dim)."""
    return rng.normal(0.0, np.sqrt(2.0 / dim), size=shape)


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, lr: float = 1e-3, **kw) -> AdamState:
        return cls(np.zeros_like(param), np.zeros_like(param), 0, lr, **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, rows=None):
    """One bias-corrected Adam update; returns ``(new_param, new_state)``.

    Inputs are not modified.  With ``rows`` only those rows are updated
    (``grad`` then holds just their gradients); the step counter is global,
    which is the usual lazy treatment of sparse embedding gradients.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    out = param.copy()
    sel = slice(None) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows is not None and grad.shape[0] != len(sel):
        raise ValueError("row gradient count does not match rows")

    m_new = b1 * m[sel].astype(np.float64) + (1.0 - b1) * grad
    v_new = b2 * v[sel].astype(np.float64) + (1.0 - b2) * grad * grad
    m_hat = m_new / (1.0 - b1**t)
    v_hat = v_new / (1.0 - b2**t)
    out[sel] = out[sel] - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    m[sel] = m_new
    v[sel] = v_new
    return out, replace(state, first_moment=m, second_moment=v, step_count=t)


def spectral_normalize(R: np.ndarray, iters: int = 20, rng=None, u=None):
    """Rescale ``R`` so its estimated largest singular value is at most 1.

    Power iteration runs ``iters`` steps starting from the persisted left
    vector ``u`` (drawn from ``rng`` when absent).  Returns ``(R, u)``; ``R``
    is returned unchanged when the estimate is <= 1.
    """
    R64 = np.asarray(R, dtype=np.float64)
    if u is None:
        if rng is None:
            rng = make_rng(0)
        u = rng.normal(size=R64.shape[0])
    u = np.asarray(u, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0 or not np.any(R64):
        return R, u
    u = u / nu
    sigma = 0.0
    for _ in range(max(int(iters), 1)):
        v = R64.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return R, u
        v /= nv
        Rv = R64 @ v
        sigma = float(np.linalg.norm(Rv))
        if sigma == 0:
            return R, u
        u = Rv / sigma
    if sigma > 1.0:
        return (R64 / sigma).astype(R.dtype), u
    return R, u


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units carry ``1 / (1 - rate)``, dropped 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)

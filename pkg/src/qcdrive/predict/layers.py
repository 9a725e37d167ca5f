"""Batched numpy layers with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(s, axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- linear ----------------------------------------------------------------------

def linear_fwd(x, W, b=None):
    y = x @ W
    return y if b is None else y + b


def linear_bwd(dy, x, W, with_bias=True):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if with_bias else None
    return dy @ W.T, dW, db


# -- layer norm ------------------------------------------------------------------

def layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def layer_norm_bwd(dy, cache, g):
    xh, inv = cache
    n = xh.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xh, axis=lead)
    db = np.sum(dy, axis=lead)
    dxh = dy * g
    dx = inv / n * (n * dxh - dxh.sum(axis=-1, keepdims=True) - xh * np.sum(dxh * xh, axis=-1, keepdims=True))
    return dx, dg, db


# -- feed-forward ------------------------------------------------------------------

def ffn_fwd(x, W1, b1, W2, b2):
    a = x @ W1 + b1
    r = np.maximum(a, 0.0)
    return r @ W2 + b2, (x, a, r)


def ffn_bwd(dy, cache, W1, W2):
    x, a, r = cache
    dr, dW2, db2 = linear_bwd(dy, r, W2)
    da = dr * (a > 0)
    dx, dW1, db1 = linear_bwd(da, x, W1)
    return dx, dW1, db1, dW2, db2


# -- multi-head attention ------------------------------------------------------------

def _split(x, h):
    # (..., T, d) -> (..., h, T, d/h)
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, h, d // h), -2, -3)


def _merge(x):
    # (..., h, T, dk) -> (..., T, h*dk)
    x = np.swapaxes(x, -2, -3)
    *lead, t, h, dk = x.shape
    return x.reshape(*lead, t, h * dk)


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def mha_fwd(q_in, kv_in, Wq, Wk, Wv, Wo, h, mask=None):
    """Multi-head attention of queries ``q_in`` (B, Tq, d) over ``E`` key/value
    sources ``kv_in`` (B, E, Tk, d); returns (B, E, Tq, d).

    ``mask`` (Tq, Tk) marks logits to drop.
    """
    dk = Wq.shape[1] // h
    Q = _split(q_in @ Wq, h)[:, None]  # (B, 1, h, Tq, dk)
    K = _split(kv_in @ Wk, h)  # (B, E, h, Tk, dk)
    V = _split(kv_in @ Wv, h)
    S = (Q @ np.swapaxes(K, -1, -2)) / math.sqrt(dk)
    if mask is not None:
        S = np.where(mask, -np.inf, S)
    A = softmax(S)
    O = _merge(A @ V)  # (B, E, Tq, d)
    return O @ Wo, (q_in, kv_in, Q, K, V, A, O)


def mha_bwd(dy, cache, Wq, Wk, Wv, Wo, h):
    """Gradients for :func:`mha_fwd`; returns (dq_in, dkv_in, dWq, dWk, dWv, dWo)."""
    q_in, kv_in, Q, K, V, A, O = cache
    dk = Wq.shape[1] // h
    dO, dWo, _ = linear_bwd(dy, O, Wo, with_bias=False)
    dOh = _split(dO, h)
    dA = dOh @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dOh
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / math.sqrt(dk)
    dQ = (dS @ K).sum(axis=1)  # queries are shared across sources
    dK = np.swapaxes(dS, -1, -2) @ Q
    dq_lin = _merge(dQ)
    dk_lin = _merge(dK)
    dv_lin = _merge(dV)
    dq_in, dWq, _ = linear_bwd(dq_lin, q_in, Wq, with_bias=False)
    dkv_k, dWk, _ = linear_bwd(dk_lin, kv_in, Wk, with_bias=False)
    dkv_v, dWv, _ = linear_bwd(dv_lin, kv_in, Wv, with_bias=False)
    return dq_in, dkv_k + dkv_v, dWq, dWk, dWv, dWo

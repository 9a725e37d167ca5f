"""Single-sample attention operators used as building blocks and test oracles."""

from __future__ import annotations

import math

import numpy as np

from .layers import softmax


def _check2d(name, m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {m.shape}")
    return m


def scaled_dot_attention(Q, K, V, mask=None) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V for matrices Q (n, d_k), K (m, d_k), V (m, d_v)."""
    Q, K, V = _check2d("Q", Q), _check2d("K", K), _check2d("V", V)
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q and K widths differ: {Q.shape[1]} vs {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K and V lengths differ: {K.shape[0]} vs {V.shape[0]}")
    s = Q @ K.T / math.sqrt(Q.shape[1])
    if mask is not None:
        s = np.where(mask, -np.inf, s)
    return softmax(s) @ V


def multi_head(Q, K, V, weights, h: int, mask=None) -> np.ndarray:
    """concat(head_1..head_h) W_O with head_i = attention(Q W_Q^i, K W_K^i, V W_V^i).

    ``weights`` maps ``W_Q``, ``W_K``, ``W_V``, ``W_O`` to (d, d) matrices.
    """
    Q, K, V = _check2d("Q", Q), _check2d("K", K), _check2d("V", V)
    d = weights["W_Q"].shape[1]
    if d % h:
        raise ValueError(f"d_model {d} is not divisible by {h} heads")
    dk = d // h
    q, k, v = Q @ weights["W_Q"], K @ weights["W_K"], V @ weights["W_V"]
    heads = [scaled_dot_attention(q[:, i * dk:(i + 1) * dk], k[:, i * dk:(i + 1) * dk],
                                  v[:, i * dk:(i + 1) * dk], mask) for i in range(h)]
    return np.concatenate(heads, axis=1) @ weights["W_O"]


def multi_encoder_attention(Q0, encoder_outputs, weights, W_M, h: int, max_encoders=None) -> np.ndarray:
    """concat(M_0..M_N) W_M with M_i = multi_head(Q0, K_i, V_i).

    Fewer encoders than rows of ``W_M`` allow use the leading block rows,
    which is how absent neighbours are skipped.
    """
    if not len(encoder_outputs):
        raise ValueError("at least one encoder output is required")
    d = weights["W_O"].shape[1]
    cap = W_M.shape[0] // d if max_encoders is None else max_encoders
    if len(encoder_outputs) > cap:
        raise ValueError(f"{len(encoder_outputs)} encoders exceed the maximum of {cap}")
    M = [multi_head(Q0, K, V, weights, h) for K, V in encoder_outputs]
    return np.concatenate(M, axis=1) @ W_M[: len(M) * d]

"""Multi-encoder single-decoder attention predictor (float64, hand-written backprop).

Encoder 0 reads the target history, encoders 1..N the neighbour histories
(one shared weight set). The decoder runs causal self-attention over its
past outputs, then attends to every encoder with one shared multi-head
block and mixes the per-encoder results through ``W_M``. Each step emits
five raw values mapped to a bivariate Gaussian by identity, exp and tanh.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..core import PredictionSeries
from . import layers as L

_ATT = ("W_Q", "W_K", "W_V", "W_O")


@dataclass(frozen=True)
class PredictorConfig:
    t_h: int = 10
    t_f: int = 15
    d_model: int = 16
    heads: int = 8
    ff_dim: int = 32
    max_encoders: int = 9  # target plus up to 8 neighbours
    loss_weights: tuple = (0.5, 1.0)
    learning_rate: float = 0.01
    seed: int = 0
    in_scale: float = 10.0  # metres per input unit
    out_scale: float = 1.0
    attention: bool = True  # False: linear map from the target history only
    optimizer: str = "adam"
    dt: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.t_h < 1 or self.t_f < 1:
            raise ValueError("t_h and t_f must be >= 1")
        if self.max_encoders < 1:
            raise ValueError("max_encoders must be >= 1")
        w1, w2 = self.loss_weights
        if not (0 <= w1 < w2):
            raise ValueError("loss weights need 0 <= w1 < w2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")

    @property
    def seq_len(self) -> int:
        return self.t_h + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "loss_weights" else v) for k, v in d.items() if k in names})


def param_shapes(cfg: PredictorConfig) -> dict:
    d, f, n = cfg.d_model, cfg.ff_dim, cfg.seq_len
    shapes = {"skip.W": (2 * n, 2 * cfg.t_f)}
    if not cfg.attention:
        shapes["lin.W"] = (2 * n, 5 * cfg.t_f)
        shapes["lin.b"] = (5 * cfg.t_f,)
        return shapes

    def block(p, with_ffn=True):
        shapes.update({f"{p}.emb.W": (2, d), f"{p}.emb.b": (d,)})
        shapes.update({f"{p}.att.{w}": (d, d) for w in _ATT})
        shapes.update({f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,)})
        if with_ffn:
            shapes.update({f"{p}.ff.W1": (d, f), f"{p}.ff.b1": (f,), f"{p}.ff.W2": (f, d), f"{p}.ff.b2": (d,),
                           f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,)})

    block("tv")
    block("nb")
    block("dec", with_ffn=False)
    shapes.update({f"dec.cross.{w}": (d, d) for w in _ATT})
    shapes.update({"dec.W_M": (cfg.max_encoders * d, d), "dec.ln2.g": (d,), "dec.ln2.b": (d,),
                   "dec.ff.W1": (d, f), "dec.ff.b1": (f,), "dec.ff.W2": (f, d), "dec.ff.b2": (d,),
                   "dec.ln3.g": (d,), "dec.ln3.b": (d,), "head.W": (d, 5), "head.b": (5,)})
    return shapes


@dataclass
class AttentionWeights:
    params: dict
    meta: dict = field(default_factory=dict)

    def check(self, cfg: PredictorConfig) -> "AttentionWeights":
        want = param_shapes(cfg)
        if set(want) != set(self.params):
            raise ValueError(f"parameter names differ: missing {sorted(set(want) - set(self.params))}, "
                             f"extra {sorted(set(self.params) - set(want))}")
        for k, s in want.items():
            a = self.params[k]
            if a.shape != s:
                raise ValueError(f"{k} has shape {a.shape}, expected {s}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{k} has non-finite entries")
        return self

    def copy(self) -> "AttentionWeights":
        return AttentionWeights({k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, k):
        return self.params[k]

    def equals(self, other: "AttentionWeights") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items())


def cv_skip(cfg: PredictorConfig) -> np.ndarray:
    """Skip weights extrapolating the last two history samples at constant velocity."""
    n = cfg.seq_len
    W = np.zeros((2 * n, 2 * cfg.t_f))
    for k in range(1, cfg.t_f + 1):
        for c in range(2):
            W[2 * (n - 1) + c, 2 * (k - 1) + c] = 1.0 + k
            W[2 * (n - 2) + c, 2 * (k - 1) + c] = -float(k)
    return W


def init_weights(cfg: PredictorConfig, skip: str = "cv") -> AttentionWeights:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for k, s in param_shapes(cfg).items():
        if k.endswith(".g"):
            out[k] = np.ones(s)
        elif len(s) == 1:
            out[k] = np.zeros(s)
        elif k == "skip.W":
            out[k] = cv_skip(cfg) if skip == "cv" and cfg.seq_len >= 2 else np.zeros(s)
        elif k in ("head.W", "lin.W"):
            out[k] = rng.normal(0, 0.01, s)
        else:
            out[k] = rng.normal(0, 1.0 / math.sqrt(s[0]), s)
    return AttentionWeights(out)


def zero_weights(cfg: PredictorConfig) -> AttentionWeights:
    return AttentionWeights({k: np.zeros(s) for k, s in param_shapes(cfg).items()})


# -- batches -------------------------------------------------------------------

@dataclass
class Batch:
    tv: np.ndarray  # (B, n, 2) target history, target frame
    nb: np.ndarray  # (B, N, n, 2) neighbour histories (zero where absent)
    mask: np.ndarray  # (B, N) bool
    target: np.ndarray | None = None  # (B, t_f, 2)

    def __len__(self):
        return len(self.tv)

    def take(self, idx) -> "Batch":
        return Batch(self.tv[idx], self.nb[idx], self.mask[idx], None if self.target is None else self.target[idx])


def make_batch(inputs, targets, cfg: PredictorConfig) -> Batch:
    """Stack fused inputs; neighbours beyond ``max_encoders - 1`` are dropped
    from the far end of the list."""
    n_nb = max(cfg.max_encoders - 1, 0)
    B, n = len(inputs), cfg.seq_len
    tv = np.empty((B, n, 2))
    nb = np.zeros((B, n_nb, n, 2))
    mask = np.zeros((B, n_nb), dtype=bool)
    for b, fi in enumerate(inputs):
        if len(fi.tv_history) != n:
            raise ValueError(f"history length {len(fi.tv_history)} does not match t_h + 1 = {n}")
        tv[b] = fi.tv_history.positions
        for i, w in enumerate(fi.neighbor_histories[:n_nb]):
            nb[b, i] = w.positions
            mask[b, i] = True
    tgt = None
    if targets is not None:
        tgt = np.asarray(targets, dtype=float).reshape(B, cfg.t_f, 2)
    return Batch(tv, nb, mask, tgt)


# -- forward / backward ------------------------------------------------------------

def _encode(P, p, x, cfg, pe):
    """Encoder block on (b, n, 2) inputs."""
    h = cfg.heads
    e = L.linear_fwd(x / cfg.in_scale, P[f"{p}.emb.W"], P[f"{p}.emb.b"]) + pe
    a, c_att = L.mha_fwd(e, e[:, None], *(P[f"{p}.att.{w}"] for w in _ATT), h)
    h1, c_ln1 = L.layer_norm_fwd(e + a[:, 0], P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
    f, c_ff = L.ffn_fwd(h1, P[f"{p}.ff.W1"], P[f"{p}.ff.b1"], P[f"{p}.ff.W2"], P[f"{p}.ff.b2"])
    h2, c_ln2 = L.layer_norm_fwd(h1 + f, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
    return h2, (x, c_att, c_ln1, c_ff, c_ln2)


def _encode_bwd(P, G, p, dh2, cache, cfg):
    x, c_att, c_ln1, c_ff, c_ln2 = cache
    h = cfg.heads
    dz, G[f"{p}.ln2.g"], G[f"{p}.ln2.b"] = L.layer_norm_bwd(dh2, c_ln2, P[f"{p}.ln2.g"])
    dh1, G[f"{p}.ff.W1"], G[f"{p}.ff.b1"], G[f"{p}.ff.W2"], G[f"{p}.ff.b2"] = L.ffn_bwd(
        dz, c_ff, P[f"{p}.ff.W1"], P[f"{p}.ff.W2"])
    dh1 = dh1 + dz
    de, G[f"{p}.ln1.g"], G[f"{p}.ln1.b"] = L.layer_norm_bwd(dh1, c_ln1, P[f"{p}.ln1.g"])
    dq, dkv, *dW = L.mha_bwd(de[:, None], c_att, *(P[f"{p}.att.{w}"] for w in _ATT), h)
    for w, g in zip(_ATT, dW):
        G[f"{p}.att.{w}"] = g
    de = de + dq + dkv[:, 0]
    _, G[f"{p}.emb.W"], G[f"{p}.emb.b"] = L.linear_bwd(de, x / cfg.in_scale, P[f"{p}.emb.W"])


def encode_all(P, batch: Batch, cfg: PredictorConfig):
    """Encoder outputs stacked as (B, 1 + N, n, d) plus caches."""
    B, n = len(batch), cfg.seq_len
    pe = L.positional_encoding(n, cfg.d_model)
    h_tv, c_tv = _encode(P, "tv", batch.tv, cfg, pe)
    N = batch.nb.shape[1]
    if N:
        h_nb, c_nb = _encode(P, "nb", batch.nb.reshape(B * N, n, 2), cfg, pe)
        H = np.concatenate([h_tv[:, None], h_nb.reshape(B, N, n, -1)], axis=1)
    else:
        c_nb, H = None, h_tv[:, None]
    return H, (c_tv, c_nb)


def decode(P, H, slot_mask, tokens, cfg: PredictorConfig):
    """Decoder over ``tokens`` (B, T, 2); returns raw head outputs (B, T, 5)."""
    B, T, _ = tokens.shape
    d, h = cfg.d_model, cfg.heads
    pe = L.positional_encoding(T, d)
    e = L.linear_fwd(tokens / cfg.in_scale, P["dec.emb.W"], P["dec.emb.b"]) + pe
    s, c_self = L.mha_fwd(e, e[:, None], *(P[f"dec.att.{w}"] for w in _ATT), h, mask=L.causal_mask(T))
    g1, c_ln1 = L.layer_norm_fwd(e + s[:, 0], P["dec.ln1.g"], P["dec.ln1.b"])
    M, c_cross = L.mha_fwd(g1, H, *(P[f"dec.cross.{w}"] for w in _ATT), h)  # (B, E, T, d)
    E = H.shape[1]
    M = M * slot_mask[:, :, None, None]
    Mc = np.moveaxis(M, 1, 2).reshape(B, T, E * d)
    WM = P["dec.W_M"][: E * d]
    c = Mc @ WM
    g2, c_ln2 = L.layer_norm_fwd(g1 + c, P["dec.ln2.g"], P["dec.ln2.b"])
    f, c_ff = L.ffn_fwd(g2, P["dec.ff.W1"], P["dec.ff.b1"], P["dec.ff.W2"], P["dec.ff.b2"])
    g3, c_ln3 = L.layer_norm_fwd(g2 + f, P["dec.ln3.g"], P["dec.ln3.b"])
    raw = L.linear_fwd(g3, P["head.W"], P["head.b"])
    return raw, (tokens, c_self, c_ln1, c_cross, slot_mask, Mc, c_ln2, c_ff, c_ln3, g3)


def _decode_bwd(P, G, draw, cache, cfg):
    tokens, c_self, c_ln1, c_cross, slot_mask, Mc, c_ln2, c_ff, c_ln3, g3 = cache
    B, T, _ = tokens.shape
    d, h = cfg.d_model, cfg.heads
    E = slot_mask.shape[1]
    dg3, G["head.W"], G["head.b"] = L.linear_bwd(draw, g3, P["head.W"])
    dz, G["dec.ln3.g"], G["dec.ln3.b"] = L.layer_norm_bwd(dg3, c_ln3, P["dec.ln3.g"])
    dg2, G["dec.ff.W1"], G["dec.ff.b1"], G["dec.ff.W2"], G["dec.ff.b2"] = L.ffn_bwd(
        dz, c_ff, P["dec.ff.W1"], P["dec.ff.W2"])
    dg2 = dg2 + dz
    dy, G["dec.ln2.g"], G["dec.ln2.b"] = L.layer_norm_bwd(dg2, c_ln2, P["dec.ln2.g"])
    WM = P["dec.W_M"][: E * d]
    dWM = np.zeros_like(P["dec.W_M"])
    dWM[: E * d] = Mc.reshape(-1, E * d).T @ dy.reshape(-1, d)
    G["dec.W_M"] = dWM
    dM = np.moveaxis((dy @ WM.T).reshape(B, T, E, d), 2, 1) * slot_mask[:, :, None, None]
    dg1, dH, *dW = L.mha_bwd(dM, c_cross, *(P[f"dec.cross.{w}"] for w in _ATT), h)
    for w, g in zip(_ATT, dW):
        G[f"dec.cross.{w}"] = g
    dg1 = dg1 + dy
    de, G["dec.ln1.g"], G["dec.ln1.b"] = L.layer_norm_bwd(dg1, c_ln1, P["dec.ln1.g"])
    dq, dkv, *dW = L.mha_bwd(de[:, None], c_self, *(P[f"dec.att.{w}"] for w in _ATT), h)
    for w, g in zip(_ATT, dW):
        G[f"dec.att.{w}"] = g
    de = de + dq + dkv[:, 0]
    _, G["dec.emb.W"], G["dec.emb.b"] = L.linear_bwd(de, tokens / cfg.in_scale, P["dec.emb.W"])
    return dH


def slot_mask(batch: Batch) -> np.ndarray:
    return np.concatenate([np.ones((len(batch), 1), dtype=bool), batch.mask], axis=1).astype(float)


def _skip(P, batch, cfg):
    B = len(batch)
    return (batch.tv.reshape(B, -1) @ P["skip.W"]).reshape(B, cfg.t_f, 2)


def head_to_params(raw, skip, cfg):
    """(B, T, 5) raw outputs -> (B, T, 5) Gaussian parameters."""
    out = np.empty_like(raw)
    out[..., :2] = cfg.out_scale * raw[..., :2] + skip
    out[..., 2:4] = np.exp(raw[..., 2:4])
    out[..., 4] = np.tanh(raw[..., 4])
    return out


def forward_train(weights: AttentionWeights, batch: Batch, cfg: PredictorConfig):
    """Teacher-forced forward pass; returns Gaussian params (B, T, 5) and a cache."""
    P = weights.params
    skip = _skip(P, batch, cfg)
    if not cfg.attention:
        raw = (batch.tv.reshape(len(batch), -1) @ P["lin.W"] + P["lin.b"]).reshape(len(batch), cfg.t_f, 5)
        return head_to_params(raw, skip, cfg), (None, None, None)
    H, c_enc = encode_all(P, batch, cfg)
    tokens = np.concatenate([np.zeros((len(batch), 1, 2)), batch.target[:, :-1]], axis=1)
    raw, c_dec = decode(P, H, slot_mask(batch), tokens, cfg)
    return head_to_params(raw, skip, cfg), (H, c_enc, c_dec)


def predict_params(weights: AttentionWeights, batch: Batch, cfg: PredictorConfig, n_steps: int | None = None) -> np.ndarray:
    """Autoregressive inference: the decoder is fed its own past means.

    ``n_steps`` stops decoding early; the result then has that many rows.
    """
    P = weights.params
    skip = _skip(P, batch, cfg)
    B = len(batch)
    n_steps = cfg.t_f if n_steps is None else min(n_steps, cfg.t_f)
    if not cfg.attention:
        raw = (batch.tv.reshape(B, -1) @ P["lin.W"] + P["lin.b"]).reshape(B, cfg.t_f, 5)
        return head_to_params(raw, skip, cfg)[:, :n_steps]
    H, _ = encode_all(P, batch, cfg)
    sm = slot_mask(batch)
    out = np.empty((B, n_steps, 5))
    tokens = np.zeros((B, 1, 2))
    for k in range(n_steps):
        raw, _ = decode(P, H, sm, tokens, cfg)
        out[:, k] = head_to_params(raw[:, -1:], skip[:, k:k + 1], cfg)[:, 0]
        tokens = np.concatenate([tokens, out[:, k:k + 1, :2]], axis=1)
    return out


# -- loss ------------------------------------------------------------------------

LOG_2PI = math.log(2 * math.pi)


def nll_terms(params, target):
    """Per-step bivariate Gaussian negative log-likelihood and displacement."""
    mx, my, sx, sy, rho = np.moveaxis(params, -1, 0)
    dx, dy = target[..., 0] - mx, target[..., 1] - my
    u, v = dx / sx, dy / sy
    omr = 1.0 - rho * rho
    q = u * u + v * v - 2 * rho * u * v
    nll = LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(omr) + q / (2 * omr)
    return nll, np.hypot(dx, dy)


def loss_and_grad_params(params, target, cfg: PredictorConfig):
    """Batch-mean loss and its gradient w.r.t. the raw head outputs and mu."""
    w1, w2 = cfg.loss_weights
    B = len(params)
    mx, my, sx, sy, rho = np.moveaxis(params, -1, 0)
    dx, dy = target[..., 0] - mx, target[..., 1] - my
    u, v = dx / sx, dy / sy
    omr = 1.0 - rho * rho
    q = u * u + v * v - 2 * rho * u * v
    nll = LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(omr) + q / (2 * omr)
    dist = np.hypot(dx, dy)
    loss = float((w1 * nll.sum() + w2 * dist.sum()) / B)
    g = np.empty_like(params)
    safe = np.where(dist > 0, dist, 1.0)
    g[..., 0] = w1 * (-(u - rho * v) / (omr * sx)) + w2 * np.where(dist > 0, -dx / safe, 0.0)
    g[..., 1] = w1 * (-(v - rho * u) / (omr * sy)) + w2 * np.where(dist > 0, -dy / safe, 0.0)
    # raw sigma outputs are logs, raw rho is atanh
    g[..., 2] = w1 * (1.0 - u * (u - rho * v) / omr)
    g[..., 3] = w1 * (1.0 - v * (v - rho * u) / omr)
    g[..., 4] = w1 * (-rho - u * v + rho * q / omr)
    return loss, g / B


def loss_and_grad(weights: AttentionWeights, batch: Batch, cfg: PredictorConfig, need_grad: bool = True):
    P = weights.params
    out, (H, c_enc, c_dec) = forward_train(weights, batch, cfg)
    loss, g = loss_and_grad_params(out, batch.target, cfg)
    if not need_grad:
        return loss, None
    G = {}
    B = len(batch)
    # mu = out_scale * raw + skip
    G["skip.W"] = batch.tv.reshape(B, -1).T @ g[..., :2].reshape(B, -1)
    draw = g.copy()
    draw[..., :2] *= cfg.out_scale
    if not cfg.attention:
        flat = draw.reshape(B, -1)
        G["lin.W"] = batch.tv.reshape(B, -1).T @ flat
        G["lin.b"] = flat.sum(axis=0)
        return loss, G
    dH = _decode_bwd(P, G, draw, c_dec, cfg)
    c_tv, c_nb = c_enc
    _encode_bwd(P, G, "tv", dH[:, 0], c_tv, cfg)
    N = dH.shape[1] - 1
    if N:
        n = cfg.seq_len
        _encode_bwd(P, G, "nb", dH[:, 1:].reshape(B * N, n, -1), c_nb, cfg)
    else:
        for k in P:
            if k.startswith("nb."):
                G[k] = np.zeros_like(P[k])
    return loss, G


def loss(pred: PredictionSeries, target, weights=(0.5, 1.0)) -> float:
    """w1 * sum_t NLL + w2 * sum_t ||Z - mu|| for one forecast."""
    target = np.asarray([[p.x, p.y] if hasattr(p, "x") else p for p in target], dtype=float)
    if len(target) != pred.t_f:
        raise ValueError("target length must equal t_f")
    nll, dist = nll_terms(pred.params, target)
    return float(weights[0] * nll.sum() + weights[1] * dist.sum())


def forward(inp, weights: AttentionWeights, cfg: PredictorConfig) -> PredictionSeries:
    """Forecast for one fused input, in the target frame."""
    return PredictionSeries(predict_params(weights, make_batch([inp], None, cfg), cfg)[0])


def predict(inputs, weights: AttentionWeights, cfg: PredictorConfig, batch_size: int = 256,
            n_steps: int | None = None) -> np.ndarray:
    """(len(inputs), n_steps or t_f, 5) forecasts in each input's target frame."""
    k = cfg.t_f if n_steps is None else min(n_steps, cfg.t_f)
    out = []
    for i in range(0, len(inputs), batch_size):
        out.append(predict_params(weights, make_batch(inputs[i:i + batch_size], None, cfg), cfg, k))
    return np.concatenate(out) if out else np.empty((0, k, 5))

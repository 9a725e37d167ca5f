"""Constant-velocity forecaster and trajectory error metrics."""

from __future__ import annotations

import numpy as np

from ..core import PredictionSeries


def cv_params(tv: np.ndarray, t_f: int, fixed_sigma: float = 1.0) -> np.ndarray:
    """Batched constant-velocity forecast from (B, n, 2) histories -> (B, t_f, 5)."""
    tv = np.asarray(tv, dtype=float)
    if tv.shape[-2] < 2:
        raise ValueError("need at least two history samples")
    last, step = tv[:, -1], tv[:, -1] - tv[:, -2]
    k = np.arange(1, t_f + 1)[None, :, None]
    out = np.zeros((len(tv), t_f, 5))
    out[..., :2] = last[:, None] + k * step[:, None]
    out[..., 2:4] = fixed_sigma * k
    return out


def predict_cv(inp, fixed_sigma: float = 1.0, t_f: int = 15) -> PredictionSeries:
    """Extrapolate the last two target samples; sigma grows linearly with the horizon."""
    return PredictionSeries(cv_params(inp.tv_history.positions[None], t_f, fixed_sigma)[0])


def _mu(p):
    return p.mu if isinstance(p, PredictionSeries) else np.asarray(p, dtype=float)[..., :2]


def rmse_ade_fde(predictions, targets):
    """(RMSE per horizon step, ADE, FDE) over matched forecasts and true futures."""
    if not len(predictions):
        raise ValueError("no predictions")
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    mu = np.stack([_mu(p) for p in predictions])
    z = np.stack([np.asarray([[q.x, q.y] if hasattr(q, "x") else q for q in t], dtype=float) for t in targets])
    if mu.shape != z.shape:
        raise ValueError(f"shape mismatch {mu.shape} vs {z.shape}")
    d = np.hypot(*(z - mu).transpose(2, 0, 1))  # (samples, t_f)
    return np.sqrt(np.mean(d * d, axis=0)), float(d.mean()), float(d[:, -1].mean())

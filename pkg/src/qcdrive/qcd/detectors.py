"""CuSum, MCuSum and GLRT stopping rules over a prediction-error stream."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .stats import GaussianSpec, log_lr

CUSUM, MCUSUM, GLRT = "cusum", "mcusum", "glrt"
KINDS = (CUSUM, MCUSUM, GLRT)
DEFAULT_GLRT_CAP = 200


class DetectorStopped(RuntimeError):
    """Raised when stepping a detector that has already declared a change."""


def threshold(alpha: float, m: int = 1) -> float:
    """Threshold giving FAR <= alpha: ln(M/alpha); M = 1 gives |ln alpha|."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return math.log(m / alpha)


@dataclass(frozen=True)
class DetectorConfig:
    kind: str
    f: GaussianSpec
    alpha: float = 0.01
    b: Optional[float] = None
    g: Optional[GaussianSpec] = None
    candidates: tuple = ()
    nu_m: Optional[float] = None
    delta_m: Optional[float] = None
    cap: int = DEFAULT_GLRT_CAP

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.kind == CUSUM and self.g is None:
            raise ValueError("CuSum needs a post-change GaussianSpec g")
        if self.kind == MCUSUM and len(self.candidates) < 1:
            raise ValueError("MCuSum needs at least one candidate")
        if self.kind == GLRT:
            if not (self.nu_m and self.nu_m > 0 and self.delta_m and self.delta_m > 0):
                raise ValueError("GLRT needs nu_m > 0 and delta_m > 0")
            if self.cap is not None and self.cap < 1 and self.cap != 0:
                raise ValueError("cap must be >= 1 (or 0 for unbounded)")
        if self.b is not None and not self.b > 0:
            raise ValueError("threshold b must be positive")

    @property
    def threshold(self) -> float:
        if self.b is not None:
            return self.b
        m = len(self.candidates) if self.kind == MCUSUM else 1
        return threshold(self.alpha, m)

    def with_threshold(self, b: float) -> "DetectorConfig":
        return replace(self, b=b)


@dataclass(frozen=True)
class DetectorState:
    """Running statistic. ``w`` is a float (CuSum, GLRT) or a tuple (MCuSum)."""

    config: DetectorConfig
    w: object = 0.0
    n: int = 0
    stopped_at: Optional[int] = None
    buffer: tuple = field(default=(), repr=False)

    @property
    def statistic(self) -> float:
        return max(self.w) if isinstance(self.w, tuple) else self.w


def init_state(config: DetectorConfig) -> DetectorState:
    if config.kind == MCUSUM:
        return DetectorState(config, w=(0.0,) * len(config.candidates))
    return DetectorState(config)


def _check(state):
    if state.stopped_at is not None:
        raise DetectorStopped(f"detector already stopped at n={state.stopped_at}")


def _finish(state, w, stat, **kw):
    n = state.n + 1
    stopped = n if stat >= state.config.threshold else None
    return replace(state, w=w, n=n, stopped_at=stopped, **kw)


def cusum_step(state: DetectorState, e: float) -> DetectorState:
    _check(state)
    cfg = state.config
    w = max(state.w + log_lr(e, cfg.f, cfg.g), 0.0)
    return _finish(state, w, w)


def mcusum_step(state: DetectorState, e: float) -> DetectorState:
    _check(state)
    cfg = state.config
    w = tuple(max(wj + log_lr(e, cfg.f, th), 0.0) for wj, th in zip(state.w, cfg.candidates))
    return _finish(state, w, max(w))


def glrt_step(state: DetectorState, e: float) -> DetectorState:
    _check(state)
    cfg = state.config
    buf = deque(state.buffer, maxlen=cfg.cap if cfg.cap else None)
    buf.append(float(e))
    w = python_glrt_value(buf, cfg)
    return _finish(state, w, w, buffer=tuple(buf))


def python_glrt_value(buf, cfg: DetectorConfig) -> float:
    return kernels.python_kernels.glrt_value(list(buf), cfg.f.mu, cfg.f.sigma, cfg.nu_m, cfg.delta_m)


def nu_hat(window: Sequence[float], mu0: float, nu_m: float) -> float:
    """Constrained MLE of the mean shift over a window (clamped at nu_m)."""
    mean_abs = float(np.mean(np.abs(np.asarray(window, dtype=float) - mu0)))
    return max(mean_abs - nu_m, 0.0) + nu_m


STEP = {CUSUM: cusum_step, MCUSUM: mcusum_step, GLRT: glrt_step}


def step(state: DetectorState, e: float) -> DetectorState:
    return STEP[state.config.kind](state, e)


def detect_stream(errors, config: DetectorConfig):
    """Run a detector over ``errors`` until it stops.

    ``errors`` may hold ``ErrorSample`` objects (their ``n`` labels the stop)
    or bare floats (1-based position labels the stop). Returns
    ``(tau or None, trace)`` with one statistic value per consumed sample.
    """
    errors = list(errors)
    if errors and hasattr(errors[0], "e"):
        labels = [x.n for x in errors]
        vals = np.array([x.e for x in errors], dtype=float)
    else:
        vals = np.asarray(errors, dtype=float)
        labels = None
    idx, trace = run_kernel(vals, config)
    if idx < 0:
        return None, trace
    return (labels[idx] if labels is not None else idx + 1), trace


def run_kernel(vals: np.ndarray, config: DetectorConfig):
    """Dispatch to the compiled/fallback kernel; returns (0-based index or -1, trace)."""
    b = config.threshold
    f = config.f
    if config.kind == CUSUM:
        return kernels.cusum_run(vals, f.mu, f.sigma, config.g.mu, config.g.sigma, b)
    if config.kind == MCUSUM:
        mus = [c.mu for c in config.candidates]
        sig = [c.sigma for c in config.candidates]
        idx, trace, _ = kernels.mcusum_run(vals, f.mu, f.sigma, mus, sig, b)
        return idx, trace
    return kernels.glrt_run(vals, f.mu, f.sigma, config.nu_m, config.delta_m, config.cap or 0, b)


def mcusum_candidates(g: GaussianSpec, spread: float = 0.3) -> tuple:
    """Four post-change candidates: mean and sigma each scaled by (1 +/- spread)."""
    out = []
    for dm in (-spread, spread):
        for ds in (-spread, spread):
            out.append(GaussianSpec(g.mu * (1 + dm), g.sigma * (1 + ds)))
    return tuple(out)


def glrt_bounds(f: GaussianSpec, g: GaussianSpec, share: float = 0.5) -> tuple[float, float]:
    """Minimum mean / sigma increments assumed known to the GLRT."""
    nu = share * (g.mu - f.mu)
    dl = share * (g.sigma - f.sigma)
    floor = 1e-3 * f.sigma
    return max(nu, floor), max(dl, floor)


def make_config(kind: str, f: GaussianSpec, g: GaussianSpec, alpha: float = 0.01, b=None, cap=DEFAULT_GLRT_CAP) -> DetectorConfig:
    """Detector of ``kind`` built from a calibrated (f, g) pair."""
    if kind == CUSUM:
        return DetectorConfig(CUSUM, f, alpha=alpha, b=b, g=g)
    if kind == MCUSUM:
        return DetectorConfig(MCUSUM, f, alpha=alpha, b=b, candidates=mcusum_candidates(g))
    nu_m, delta_m = glrt_bounds(f, g)
    return DetectorConfig(GLRT, f, alpha=alpha, b=b, nu_m=nu_m, delta_m=delta_m, cap=cap)

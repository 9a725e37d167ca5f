"""Quickest change detection on prediction-error streams."""

from .detectors import (
    CUSUM,
    GLRT,
    KINDS,
    MCUSUM,
    DetectorConfig,
    DetectorState,
    DetectorStopped,
    cusum_step,
    detect_stream,
    glrt_step,
    init_state,
    make_config,
    mcusum_candidates,
    mcusum_step,
    nu_hat,
    step,
    threshold,
)
from .kernels import BACKEND
from .montecarlo import FarEstimate, estimate_add, estimate_far, estimate_wadd, stop_times
from .stats import ErrorSample, GaussianSpec, calibrate, kl_gaussian, log_lr


def prediction_error(z, mu) -> float:
    """Euclidean distance between a revealed position and a predicted mean."""
    zx, zy = (z.x, z.y) if hasattr(z, "x") else z
    mx, my = (mu.x, mu.y) if hasattr(mu, "x") else mu
    return float(((zx - mx) ** 2 + (zy - my) ** 2) ** 0.5)

"""Gaussian prediction-error models: likelihood ratios, KL divergence, fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class GaussianSpec:
    """Univariate normal law of the prediction error (meters)."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"invalid GaussianSpec(mu={self.mu}, sigma={self.sigma})")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mu, self.sigma, size)


@dataclass(frozen=True)
class ErrorSample:
    n: int
    e: float

    def __post_init__(self):
        if not self.e >= 0:
            raise ValueError(f"prediction error must be >= 0, got {self.e}")


def log_lr(e, f: GaussianSpec, g: GaussianSpec):
    """log g(e)/f(e) for normal f (pre-change) and g (post-change).

    Works elementwise on arrays.
    """
    return (
        (e - f.mu) ** 2 / (2.0 * f.sigma**2)
        - (e - g.mu) ** 2 / (2.0 * g.sigma**2)
        + math.log(f.sigma / g.sigma)
    )


def kl_gaussian(f: GaussianSpec, g: GaussianSpec) -> float:
    """KL(f || g) in nats."""
    return (
        math.log(g.sigma / f.sigma)
        + (f.sigma**2 + (f.mu - g.mu) ** 2) / (2.0 * g.sigma**2)
        - 0.5
    )


def calibrate(errors: Iterable) -> GaussianSpec:
    """Sample mean and (n-1) standard deviation of an error stream.

    Accepts ``ErrorSample`` objects or plain floats.
    """
    vals = np.array([getattr(x, "e", x) for x in errors], dtype=float)
    if len(vals) < 2:
        raise ValueError("calibration needs at least 2 samples")
    sd = float(vals.std(ddof=1))
    if not sd > 0:
        raise ValueError("degenerate error stream: zero standard deviation")
    return GaussianSpec(float(vals.mean()), sd)

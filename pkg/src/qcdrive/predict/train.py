"""Training loop, optimisers and finite-difference gradient verification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import AttentionWeights, Batch, PredictorConfig, init_weights, loss_and_grad, make_batch


@dataclass(frozen=True)
class TrainingSample:
    input: object  # FusedInput
    target: np.ndarray  # (t_f, 2) future target positions in the input's frame

    def __post_init__(self):
        t = np.asarray([[p.x, p.y] if hasattr(p, "x") else p for p in self.target], dtype=float)
        object.__setattr__(self, "target", t)


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k in sorted(params):
            params[k] -= self.lr * grads[k]


def samples_to_batch(samples, cfg: PredictorConfig) -> Batch:
    return make_batch([s.input for s in samples], np.stack([s.target for s in samples]), cfg)


def mean_loss(weights: AttentionWeights, batch: Batch, cfg: PredictorConfig, chunk: int = 512) -> float:
    tot = 0.0
    for i in range(0, len(batch), chunk):
        part = batch.take(slice(i, i + chunk))
        tot += loss_and_grad(weights, part, cfg, need_grad=False)[0] * len(part)
    return tot / len(batch)


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def lr_factor(schedule: str, it: int, steps: int, floor: float = 0.01) -> float:
    """Multiplier on the base learning rate at step ``it``."""
    if schedule == "constant":
        return 1.0
    if schedule == "cosine":
        return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * it / max(steps, 1)))
    raise ValueError(f"unknown schedule {schedule!r}")


def train(samples, cfg: PredictorConfig, steps: int = 500, batch_size: int = 32,
          weights: AttentionWeights | None = None, clip: float = 10.0, log=None,
          schedule: str = "constant") -> AttentionWeights:
    """Minibatch training with a fixed, seeded sample order.

    Returns the trained weights, or the starting weights if training did not
    lower the mean loss over ``samples``. ``meta`` records both losses and
    the per-step minibatch losses. ``schedule="cosine"`` anneals the rate
    from ``cfg.learning_rate`` down to 1% of it.
    """
    lr_factor(schedule, 0, steps)
    if not len(samples):
        raise ValueError("no training samples")
    batch = samples_to_batch(samples, cfg) if not isinstance(samples, Batch) else samples
    start = (weights or init_weights(cfg)).copy()
    w = start.copy()
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    initial = mean_loss(start, batch, cfg)
    history = []
    order = rng.permutation(len(batch))
    pos = 0
    for it in range(steps):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(batch)), 0
        idx = np.sort(order[pos:pos + batch_size])
        pos += batch_size
        lval, grads = loss_and_grad(w, batch.take(idx), cfg)
        if not math.isfinite(lval):
            raise TrainingDiverged(f"loss became {lval} at step {it}")
        _clip(grads, clip)
        opt.lr = cfg.learning_rate * lr_factor(schedule, it, steps)
        opt.step(w.params, grads)
        history.append(lval)
        if log is not None and (it % 50 == 0 or it == steps - 1):
            log(f"step {it} loss {lval:.4f}")
    final = mean_loss(w, batch, cfg)
    if not math.isfinite(final):
        raise TrainingDiverged(f"final loss is {final}")
    if final > initial:
        w, final = start, initial
    w.meta.update(initial_loss=initial, final_loss=final, history=history, steps=steps)
    return w


def grad_check(weights: AttentionWeights, samples, cfg: PredictorConfig, n_coords: int = 240,
               eps: float = 1e-5, seed: int = 0, corrupt: str | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are spread over every parameter tensor. ``corrupt`` names a
    weight suffix (e.g. ``"W_O"``) whose analytic gradient is deliberately
    scaled, as a negative control.
    """
    batch = samples if isinstance(samples, Batch) else samples_to_batch(
        samples if isinstance(samples, (list, tuple)) else [samples], cfg)
    base, grads = loss_and_grad(weights, batch, cfg)
    if not math.isfinite(base):
        raise ValueError("loss is not finite at these weights")
    if corrupt is not None:
        hit = [k for k in grads if k.endswith(corrupt)]
        if not hit:
            raise ValueError(f"no parameter ends with {corrupt!r}")
        for k in hit:
            grads[k] = grads[k] * 1.5 + 1e-3
    rng = np.random.default_rng(seed)
    names = sorted(weights.params)
    per = max(1, math.ceil(n_coords / len(names)))
    w = weights.copy()
    worst = 0.0
    for k in names:
        if corrupt is not None and not k.endswith(corrupt):
            continue
        a = w.params[k]
        picks = rng.choice(a.size, size=min(per, a.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, a.shape)
            old = a[idx]
            a[idx] = old + eps
            lp = loss_and_grad(w, batch, cfg, need_grad=False)[0]
            a[idx] = old - eps
            lm = loss_and_grad(w, batch, cfg, need_grad=False)[0]
            a[idx] = old
            num = (lp - lm) / (2 * eps)
            ana = float(grads[k][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            worst = max(worst, err)
    return worst

"""V2V observation sharing: occlusion-aware sensing, share messages and fusion
into target-vehicle-frame predictor inputs."""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NEIGHBOR_RANGE, FrameTransform, Position2D, TrajectoryWindow, neighbor_set

SENSE_RANGE = 60.0
OCCLUDER_RADIUS = 1.0
COMM_RANGE = 150.0
MAX_NEIGHBORS = 8

_NOISE_TABLE = {0: (0.0, 0.0), 1: (0.3, 0.2), 2: (0.3, 0.4), 3: (0.6, 0.2), 4: (0.6, 0.4)}


@dataclass(frozen=True)
class NoiseLevel:
    level: int
    magnitude_mean: float
    magnitude_sd: float

    def __post_init__(self):
        if self.level not in _NOISE_TABLE:
            raise ValueError(f"noise level must be one of {sorted(_NOISE_TABLE)}")
        if (self.magnitude_mean, self.magnitude_sd) != _NOISE_TABLE[self.level]:
            raise ValueError(f"level {self.level} is {_NOISE_TABLE[self.level]}")

    @classmethod
    def of(cls, level: int) -> "NoiseLevel":
        if level not in _NOISE_TABLE:
            raise ValueError(f"noise level must be one of {sorted(_NOISE_TABLE)}")
        return cls(level, *_NOISE_TABLE[level])


NOISE_LEVELS = tuple(NoiseLevel.of(k) for k in sorted(_NOISE_TABLE))


def displacement(noise: NoiseLevel, z, psi) -> np.ndarray:
    """Offsets for standard-normal ``z`` and angle ``psi``; shape (..., 2).

    Keeping the base draws separate from the level lets every noise level
    reuse the same random numbers.
    """
    r = np.maximum(noise.magnitude_mean + noise.magnitude_sd * np.asarray(z, dtype=float), 0.0)
    return np.stack([r * np.cos(psi), r * np.sin(psi)], axis=-1)


def sense(true_pos: Position2D, noise: NoiseLevel, rng) -> Position2D:
    if noise.level == 0:
        return true_pos
    z = rng.standard_normal()
    psi = rng.uniform(0.0, 2 * math.pi)
    dx, dy = displacement(noise, z, psi)
    return Position2D(true_pos.x + float(dx), true_pos.y + float(dy))


def visible_mask(observer_xy, targets_xy, others_xy, sense_range=SENSE_RANGE,
                 radius=OCCLUDER_RADIUS) -> np.ndarray:
    """Line-of-sight test of each target against disks around ``others_xy``.

    A target never occludes itself; callers exclude the observer from both
    arrays.
    """
    p = np.asarray(observer_xy, dtype=float)
    tg = np.asarray(targets_xy, dtype=float).reshape(-1, 2)
    oc = np.asarray(others_xy, dtype=float).reshape(-1, 2)
    d = tg - p
    ok = np.hypot(d[:, 0], d[:, 1]) <= sense_range
    if not len(oc) or not ok.any():
        return ok
    seg2 = np.einsum("ij,ij->i", d, d)
    rel = oc - p  # (m, 2)
    s = (d @ rel.T) / np.where(seg2 > 0, seg2, 1.0)[:, None]  # (k, m)
    s = np.clip(s, 0.0, 1.0)
    near = p + s[..., None] * d[:, None, :] - oc[None, :, :]
    blocked = np.einsum("kmi,kmi->km", near, near) < radius * radius
    # a target does not block itself
    same = np.all(tg[:, None, :] == oc[None, :, :], axis=2)
    blocked &= ~same
    return ok & ~blocked.any(axis=1)


def visible_set(observer, vehicles, sense_range: float = SENSE_RANGE, radius: float = OCCLUDER_RADIUS) -> list:
    """Ids of ``VehicleState`` objects the observer can see, in input order."""
    if not sense_range > 0:
        raise ValueError("range must be positive")
    others = [v for v in vehicles if v.id != observer.id]
    if not others:
        return []
    xy = np.array([[v.pos.x, v.pos.y] for v in others])
    mask = visible_mask([observer.pos.x, observer.pos.y], xy, xy, sense_range, radius)
    return [v.id for v, m in zip(others, mask) if m]


# -- messages and fusion -------------------------------------------------------

@dataclass(frozen=True)
class ShareMessage:
    sender_id: int
    sender_history: TrajectoryWindow
    sensed: dict = field(default_factory=dict)

    def __post_init__(self):
        h = self.sender_history
        for vid, w in self.sensed.items():
            if (w.t0, w.dt, len(w)) != (h.t0, h.dt, len(h)):
                raise ValueError(f"window for {vid} is not aligned with the sender history")

    def to_json(self) -> str:
        return json.dumps({
            "sender": self.sender_id,
            "t0": self.sender_history.t0,
            "dt": self.sender_history.dt,
            "self": self.sender_history.positions.tolist(),
            "sensed": {str(k): w.positions.tolist() for k, w in sorted(self.sensed.items())},
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ShareMessage":
        d = json.loads(line)
        t0, dt = d["t0"], d.get("dt", 0.2)
        own = TrajectoryWindow(d["sender"], t0, dt, d["self"])
        return cls(d["sender"], own, {int(k): TrajectoryWindow(int(k), t0, dt, v) for k, v in d["sensed"].items()})


def dump_messages(path, messages) -> None:
    with open(path, "w") as fh:
        for m in messages:
            fh.write(m.to_json() + "\n")


@dataclass(frozen=True)
class FusedInput:
    tv_id: int
    tv_history: TrajectoryWindow
    neighbor_ids: tuple
    neighbor_histories: tuple
    frame: FrameTransform

    @property
    def n_neighbors(self) -> int:
        return len(self.neighbor_histories)


class FusionError(RuntimeError):
    """The target's history is not available from any source."""


def fuse(ev, messages, ev_own: ShareMessage, tv, max_neighbors: int = MAX_NEIGHBORS,
         rng: float = NEIGHBOR_RANGE) -> FusedInput:
    """Merge share messages into a target-frame input for ``tv``.

    Self-reports are exact and take priority; sensed copies of the same
    vehicle are averaged per step in sender-id order so the result does not
    depend on message order.
    """
    by_sender = {ev_own.sender_id: ev_own}
    for m in messages:
        by_sender.setdefault(m.sender_id, m)
    srcs = [by_sender[k] for k in sorted(by_sender)]
    ref = ev_own.sender_history
    exact, sensed = {}, {}
    for m in srcs:
        if (m.sender_history.t0, len(m.sender_history)) != (ref.t0, len(ref)):
            raise ValueError("messages must share t0 and length")
        exact[m.sender_id] = m.sender_history.positions
        for vid, w in m.sensed.items():
            sensed.setdefault(vid, []).append(w.positions)
    windows = dict(exact)
    for vid, lst in sensed.items():
        if vid not in windows:
            # shifted mean: identical copies fuse to themselves bit for bit
            windows[vid] = lst[0] if len(lst) == 1 else lst[0] + np.mean(np.stack(lst) - lst[0], axis=0)
    if tv not in windows:
        raise FusionError(f"vehicle {tv} is not observed over the window")
    last = windows[tv][-1]
    frame = FrameTransform(Position2D(float(last[0]), float(last[1])))
    cands = [(vid, Position2D(float(w[-1, 0]), float(w[-1, 1]))) for vid, w in windows.items()]
    near = neighbor_set(frame, cands, tv_id=tv, rng=rng)
    if len(near) > max_neighbors:
        dist = {vid: abs(p.y - last[1]) for vid, p in cands}
        keep = set(sorted(near, key=lambda v: (dist[v], v))[:max_neighbors])
        near = [v for v in near if v in keep]
    t0, dt = ref.t0, ref.dt
    tw = TrajectoryWindow(tv, t0, dt, frame.apply(windows[tv]))
    nbr = tuple(TrajectoryWindow(v, t0, dt, frame.apply(windows[v])) for v in near)
    return FusedInput(tv, tw, tuple(near), nbr, frame)


# -- scene: sensing on top of a simulation log ---------------------------------

class _LRU(OrderedDict):
    def __init__(self, maxsize):
        super().__init__()
        self.maxsize = maxsize

    def put(self, key, value):
        self[key] = value
        if len(self) > self.maxsize:
            self.popitem(last=False)
        return value


class Scene:
    """Sensing view of a simulated run.

    Windows hold ``t_h + 1`` samples spaced ``stride`` simulator steps apart,
    the newest at ``t0``. Sensing noise for observer ``o`` looking at ``j`` at
    step ``t`` comes from a stream keyed by ``(seed, o, j)``, so it is the
    same whichever window or target the observation is used for, and the
    same base draws are shared by every noise level.
    """

    CHUNK = 256

    def __init__(self, result, stride: int = 2, t_h: int = 10, seed: int = 0,
                 sense_range: float = SENSE_RANGE, comm_range: float = COMM_RANGE,
                 radius: float = OCCLUDER_RADIUS, max_neighbors: int = MAX_NEIGHBORS):
        self.result = result
        self.tracks = result.tracks
        self.stride, self.t_h, self.seed = stride, t_h, seed
        self.sense_range, self.comm_range, self.radius = sense_range, comm_range, radius
        self.max_neighbors = max_neighbors
        self.dt = result.config.dt * stride
        vids = sorted(self.tracks)
        t = np.concatenate([self.tracks[v].t for v in vids])
        ids = np.concatenate([np.full(len(self.tracks[v].t), v) for v in vids])
        x = np.concatenate([self.tracks[v].x for v in vids])
        y = np.concatenate([self.tracks[v].y for v in vids])
        av = np.concatenate([np.full(len(self.tracks[v].t), self.tracks[v].kind == "av") for v in vids])
        order = np.lexsort((ids, t))
        self._t, self._id = t[order], ids[order]
        self._xy = np.column_stack([x[order], y[order]])
        self._av = av[order]
        self._vis = _LRU(200_000)
        self._noise = _LRU(100_000)
        self._msg = _LRU(20_000)
        self._seen = _LRU(50_000)
        self._own = _LRU(50_000)
        self._win = _LRU(200_000)

    # snapshots
    def snapshot(self, t: int):
        lo, hi = np.searchsorted(self._t, [t, t + 1])
        return self._id[lo:hi], self._xy[lo:hi], self._av[lo:hi]

    def steps(self, t0: int) -> np.ndarray:
        return t0 - self.stride * np.arange(self.t_h, -1, -1)

    def present(self, vid: int, t0: int) -> bool:
        tr = self.tracks[vid]
        return tr.t_enter <= t0 - self.stride * self.t_h and t0 <= tr.t_exit

    def true_window(self, vid: int, t0: int) -> np.ndarray:
        tr = self.tracks[vid]
        i = self.steps(t0) - tr.t_enter
        return np.column_stack([tr.x[i], tr.y[i]])

    def prediction_times(self, vid: int, t_f: int = 0) -> np.ndarray:
        """Window end steps on the stride grid with history (and ``t_f`` future samples) inside the track."""
        tr = self.tracks[vid]
        first = tr.t_enter + self.stride * self.t_h
        first += (-first) % self.stride
        last = tr.t_exit - self.stride * t_f
        return np.arange(first, last + 1, self.stride)

    # sensing
    def visible(self, observer: int, t: int) -> frozenset:
        key = (observer, t)
        hit = self._vis.get(key)
        if hit is not None:
            return hit
        ids, xy, _ = self.snapshot(t)
        me = np.flatnonzero(ids == observer)
        if not len(me):
            return self._vis.put(key, frozenset())
        p = xy[me[0]]
        d = np.abs(xy[:, 1] - p[1])
        sel = (ids != observer) & (d <= self.sense_range + self.radius)
        oth_ids, oth = ids[sel], xy[sel]
        mask = visible_mask(p, oth, oth, self.sense_range, self.radius)
        return self._vis.put(key, frozenset(oth_ids[mask].tolist()))

    def _noise_block(self, observer, target, c):
        key = (observer, target, c)
        blk = self._noise.get(key)
        if blk is None:
            g = np.random.default_rng([self.seed, observer, target, c])
            blk = self._noise.put(key, (g.standard_normal(self.CHUNK), g.uniform(0, 2 * math.pi, self.CHUNK)))
        return blk

    def base_noise(self, observer: int, target: int, steps) -> tuple[np.ndarray, np.ndarray]:
        steps = np.asarray(steps)
        c0, c1 = int(steps[0]) // self.CHUNK, int(steps[-1]) // self.CHUNK
        if c0 == c1 and steps.min() >= 0:
            z, psi = self._noise_block(observer, target, c0)
            i = steps - c0 * self.CHUNK
            return z[i], psi[i]
        z = np.empty(len(steps))
        psi = np.empty(len(steps))
        for c in np.unique(steps // self.CHUNK):
            blk = self._noise_block(observer, target, int(c))
            m = steps // self.CHUNK == c
            z[m] = blk[0][steps[m] % self.CHUNK]
            psi[m] = blk[1][steps[m] % self.CHUNK]
        return z, psi

    def seen(self, sender: int, t0: int) -> frozenset:
        """Vehicles ``sender`` can see at every step of the window ending at ``t0``."""
        key = (sender, t0)
        hit = self._seen.get(key)
        if hit is None:
            hit = None
            for t in self.steps(t0).tolist():
                v = self.visible(sender, t)
                hit = v if hit is None else hit & v
                if not hit:
                    break
            hit = self._seen.put(key, hit or frozenset())
        return hit

    def sensed_window(self, sender: int, target: int, t0: int, noise: NoiseLevel) -> TrajectoryWindow:
        key = (sender, target, t0, noise.level)
        hit = self._win.get(key)
        if hit is None:
            pos = self.true_window(target, t0)
            if noise.level:
                pos = pos + displacement(noise, *self.base_noise(sender, target, self.steps(t0)))
            hit = self._win.put(key, TrajectoryWindow(target, int(t0), self.dt, pos))
        return hit

    def _own_window(self, sender: int, t0: int) -> TrajectoryWindow:
        key = (sender, t0)
        hit = self._own.get(key)
        if hit is None:
            hit = self._own.put(key, TrajectoryWindow(sender, int(t0), self.dt, self.true_window(sender, t0)))
        return hit

    def _y_at(self, t0: int, vids) -> np.ndarray:
        ids, xy, _ = self.snapshot(t0)
        return xy[np.searchsorted(ids, vids), 1]

    def message(self, sender: int, t0: int, noise: NoiseLevel, y_range=None) -> Optional[ShareMessage]:
        """What ``sender`` shares at ``t0``; None if it lacks a full own history.

        ``y_range = (lo, hi)`` keeps only sensed vehicles whose true position
        at ``t0`` lies in that band, for callers that can rule the rest out.
        """
        if y_range is None:
            key = (sender, t0, noise.level)
            if key in self._msg:
                return self._msg[key]
        if not self.present(sender, t0):
            return None if y_range is not None else self._msg.put(key, None)
        targets = sorted(self.seen(sender, t0))
        if y_range is not None and targets:
            y = self._y_at(t0, targets)
            targets = [j for j, yj in zip(targets, y.tolist()) if y_range[0] <= yj <= y_range[1]]
        sensed = {j: self.sensed_window(sender, j, t0, noise) for j in targets}
        msg = ShareMessage(sender, self._own_window(sender, t0), sensed)
        return msg if y_range is not None else self._msg.put(key, msg)

    def ego(self, tv: int, t0: int) -> Optional[int]:
        """Nearest connected AV to the target at ``t0``."""
        ids, xy, av = self.snapshot(t0)
        me = np.flatnonzero(ids == tv)
        cand = np.flatnonzero(av & (ids != tv))
        if not len(me) or not len(cand):
            return None
        d = np.hypot(*(xy[cand] - xy[me[0]]).T)
        best = np.lexsort((ids[cand], d))[0]
        return int(ids[cand][best])

    def senders(self, ev: int, t0: int, sharing: bool = True) -> list:
        if not sharing:
            return [ev]
        ids, xy, av = self.snapshot(t0)
        me = np.flatnonzero(ids == ev)
        if not len(me):
            return [ev]
        d = np.hypot(*(xy - xy[me[0]]).T)
        return sorted(int(i) for i in ids[av & (d <= self.comm_range)])

    def fused_input(self, tv: int, t0: int, noise: NoiseLevel, sharing: bool = True) -> FusedInput:
        ev = self.ego(tv, t0)
        if ev is None:
            raise FusionError("no connected vehicle on the road")
        # Sensed vehicles further than this from the target cannot end up
        # within the neighbour range once both positions carry noise
        # (magnitudes bounded by mean + 10 sd).
        y_tv = float(self._y_at(t0, [tv])[0])
        reach = NEIGHBOR_RANGE + 2 * (noise.magnitude_mean + 10 * noise.magnitude_sd)
        band = (y_tv - reach, y_tv + reach)
        own = self.message(ev, t0, noise, band)
        if own is None:
            raise FusionError(f"ego vehicle {ev} lacks a full history")
        msgs = [m for m in (self.message(s, t0, noise, band) for s in self.senders(ev, t0, sharing))
                if m is not None]
        return fuse(ev, msgs, own, tv, self.max_neighbors)

    def exact_input(self, tv: int, t0: int) -> FusedInput:
        """Full-knowledge input: every present vehicle's true history."""
        ids, _, _ = self.snapshot(t0)
        own = ShareMessage(tv, TrajectoryWindow(tv, int(t0), self.dt, self.true_window(tv, t0)))
        others = [ShareMessage(int(v), TrajectoryWindow(int(v), int(t0), self.dt, self.true_window(int(v), t0)))
                  for v in ids.tolist() if v != tv and self.present(int(v), t0)]
        return fuse(tv, others, own, tv, self.max_neighbors)

    def future(self, vid: int, t0: int, t_f: int) -> np.ndarray:
        """True global positions at ``t0 + k*stride`` for k = 1..t_f."""
        tr = self.tracks[vid]
        i = t0 + self.stride * np.arange(1, t_f + 1) - tr.t_enter
        return np.column_stack([tr.x[i], tr.y[i]])

"""Domain types, reference frames and neighbour selection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NEIGHBOR_RANGE = 30.0
DEFAULT_DT = 0.1


@dataclass(frozen=True)
class Position2D:
    """Planar position; ``x`` is lateral, ``y`` longitudinal (meters)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrajectoryWindow:
    """Uniformly sampled position history, oldest first.

    ``positions`` is an (n, 2) array; ``t0`` is the sample index of the
    newest row and ``dt`` the spacing between rows in seconds.
    """

    vehicle_id: int
    t0: int
    dt: float
    positions: np.ndarray = field(repr=False)

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) == 0:
            raise ValueError(f"positions must be (n, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "positions", pos)

    @property
    def t_h(self) -> int:
        return len(self.positions) - 1

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryWindow):
            return NotImplemented
        return (
            self.vehicle_id == other.vehicle_id
            and self.t0 == other.t0
            and self.dt == other.dt
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self):
        return hash((self.vehicle_id, self.t0, self.dt, self.positions.tobytes()))


@dataclass(frozen=True)
class FrameTransform:
    """Target-vehicle frame: translate to ``origin`` then rotate by ``-heading``."""

    origin: Position2D
    heading: float = 0.0

    def _rot(self, angle):
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Vectorised :func:`to_frame` for an (n, 2) array."""
        d = np.asarray(pts, dtype=float) - self.origin.as_array()
        if self.heading == 0.0:
            return d
        return d @ self._rot(-self.heading).T

    def invert(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        if self.heading != 0.0:
            p = p @ self._rot(self.heading).T
        return p + self.origin.as_array()


@dataclass(frozen=True)
class BivariateGaussian:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("sigmas must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")


@dataclass(frozen=True)
class PredictionSeries:
    """Per-step forecast; ``params`` is a (t_f, 5) array of
    (mu_x, mu_y, sigma_x, sigma_y, rho)."""

    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = _frozen(self.params)
        if p.ndim != 2 or p.shape[1] != 5:
            raise ValueError(f"params must be (t_f, 5), got {p.shape}")
        object.__setattr__(self, "params", p)

    @classmethod
    def from_steps(cls, steps: Sequence[BivariateGaussian]) -> "PredictionSeries":
        return cls(np.array([[s.mu_x, s.mu_y, s.sigma_x, s.sigma_y, s.rho] for s in steps]))

    @property
    def steps(self) -> list[BivariateGaussian]:
        return [BivariateGaussian(*map(float, row)) for row in self.params]

    @property
    def mu(self) -> np.ndarray:
        return self.params[:, :2]

    @property
    def t_f(self) -> int:
        return len(self.params)

    def __len__(self):
        return len(self.params)


def to_frame(global_pos: Position2D, frame: FrameTransform) -> Position2D:
    x, y = frame.apply(global_pos.as_array()[None, :])[0]
    return Position2D(float(x), float(y))


def from_frame(local_pos: Position2D, frame: FrameTransform) -> Position2D:
    x, y = frame.invert(local_pos.as_array()[None, :])[0]
    return Position2D(float(x), float(y))


def neighbor_set(tv_frame: FrameTransform, vehicles, tv_id=None, rng=NEIGHBOR_RANGE) -> list:
    """Ids within ``[-rng, +rng]`` longitudinally of the target, ordered by local y.

    ``vehicles`` is an iterable of ``(id, Position2D)`` in global coordinates.
    The target itself is excluded, either by ``tv_id`` or by sitting exactly
    on the frame origin.
    """
    picked = []
    for vid, pos in vehicles:
        if tv_id is not None and vid == tv_id:
            continue
        lx, ly = frame_xy(tv_frame, pos)
        if tv_id is None and lx == 0.0 and ly == 0.0:
            continue
        if -rng <= ly <= rng:
            picked.append((ly, vid))
    picked.sort()
    return [vid for _, vid in picked]


def frame_xy(frame: FrameTransform, pos: Position2D) -> tuple[float, float]:
    dx, dy = pos.x - frame.origin.x, pos.y - frame.origin.y
    if frame.heading == 0.0:
        return dx, dy
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    return c * dx + s * dy, -s * dx + c * dy


# -- serialization -----------------------------------------------------------

TRAJ_HEADER = ("vehicle_id", "t", "x", "y")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_trajectories_csv(path, rows: Iterable[tuple[int, int, float, float]]) -> None:
    """Write ``vehicle_id,t,x,y`` rows with 9 significant digits."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRAJ_HEADER) + "\n")
        for vid, t, x, y in rows:
            fh.write(f"{vid},{t},{_fmt(x)},{_fmt(y)}\n")


def read_trajectories_csv(path) -> list[tuple[int, int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRAJ_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(int(v), int(t), float(x), float(y)) for v, t, x, y in reader]


def load_trajectory_arrays(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Read a trajectory CSV into ``{id: (t[n], xy[n, 2])}`` (fast path)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    if data.size == 0:
        return out
    ids = data[:, 0].astype(np.int64)
    order = np.lexsort((data[:, 1], ids))
    data, ids = data[order], ids[order]
    bounds = np.flatnonzero(np.diff(ids)) + 1
    for chunk in np.split(np.arange(len(ids)), bounds):
        vid = int(ids[chunk[0]])
        out[vid] = (data[chunk, 1].astype(np.int64), data[chunk, 2:4].copy())
    return out


def write_trajectories_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for vid, t, x, y in rows:
            fh.write(json.dumps({"vehicle_id": vid, "t": t, "x": float(_fmt(x)), "y": float(_fmt(y))}) + "\n")


def read_trajectories_jsonl(path) -> list[tuple[int, int, float, float]]:
    with open(path) as fh:
        return [(r["vehicle_id"], r["t"], r["x"], r["y"]) for r in map(json.loads, fh) if r]

"""Seeded microscopic traffic simulator for a straight multilane road.

Longitudinal motion follows a Krauss-type safe-speed rule with driver
imperfection; lateral motion is a discrete lane choice executed as a smooth
cosine manoeuvre. Selected human-driven vehicles switch from the normal to
the abnormal parameter set when they first pass a random location.
"""

from __future__ import annotations

import bisect
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .core import Position2D, load_trajectory_arrays, write_trajectories_csv

LANE_WIDTH = 3.2
VEHICLE_LENGTH = 5.0
LC_DURATION = 2.0  # seconds for the lateral manoeuvre
LC_LOOKAHEAD = 100.0
LC_GAIN_THRESHOLD = 1.0  # m/s
LC_WRONG_TIMING = 0.1  # scaled by lc_sigma
COOP_TIME = 1.0  # s of closing speed a cooperative driver leaves behind

STAY, LEFT, RIGHT = "stay", "left", "right"
NORMAL, ABNORMAL = "normal", "abnormal"
AV, HV = "av", "hv"


@dataclass(frozen=True)
class DrivingParams:
    accel: float
    decel: float
    min_gap: float
    sigma: float
    max_speed: float
    speed_factor: float = 1.0
    lc_cooperative: float = 1.0
    lc_speed_gain: float = 1.0
    lc_sigma: float = 0.0

    def __post_init__(self):
        for name in ("accel", "decel", "min_gap", "max_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.sigma <= 1 and 0 <= self.lc_sigma <= 1):
            raise ValueError("sigma and lc_sigma must lie in [0, 1]")

    @property
    def desired_speed(self) -> float:
        return self.max_speed * self.speed_factor


NORMAL_PARAMS = {
    "highway": DrivingParams(2.6, 4.5, 2.5, 0.1, 30.0, 1.0, 1.0, 1.0, 0.1),
    "urban": DrivingParams(2.6, 4.5, 2.5, 0.1, 16.0, 1.0, 1.0, 1.0, 0.1),
}
ABNORMAL_PARAMS = {
    "highway": [DrivingParams(7.0, 8.0, 1.0, 0.8, v, 1.2, 0.1, 5.0, 0.8) for v in (20.0, 45.0)],
    "urban": [DrivingParams(7.0, 8.0, 1.0, 0.8, v, 1.2, 0.1, 5.0, 0.8) for v in (7.0, 25.0)],
}


@dataclass(frozen=True)
class ScenarioConfig:
    lanes: int = 5
    road_length: float = 1000.0
    volume: float = 8000.0
    duration: float = 3600.0
    seed: int = 0
    n_av: int = 1
    n_hv: int = 1
    abnormal_fraction: float = 0.25
    dt: float = 0.1
    road_type: str = "highway"

    def __post_init__(self):
        problems = []
        if self.lanes < 1:
            problems.append("lanes must be >= 1")
        if self.n_av < 0 or self.n_hv < 0 or self.n_av + self.n_hv <= 0:
            problems.append("n_av + n_hv must be positive")
        if not 0 <= self.abnormal_fraction <= 1:
            problems.append("abnormal_fraction must lie in [0, 1]")
        if not (self.dt > 0 and self.duration > 0 and self.road_length > 0 and self.volume >= 0):
            problems.append("dt, duration, road_length must be positive and volume >= 0")
        if self.road_type not in NORMAL_PARAMS:
            problems.append(f"road_type must be one of {sorted(NORMAL_PARAMS)}")
        if problems:
            raise ValueError("invalid scenario: " + "; ".join(problems))

    @property
    def av_share(self) -> float:
        return self.n_av / (self.n_av + self.n_hv)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        return cls(**parse_key_values(text, cls))

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


def parse_key_values(text: str, cls) -> dict:
    """Parse a flat ``key=value`` file against the fields of dataclass ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        typ = types[key]
        try:
            out[key] = int(val) if typ == "int" else float(val) if typ == "float" else val
        except ValueError:
            raise ValueError(f"line {lineno}: bad value for {key}: {val!r}") from None
    return out


@dataclass(frozen=True)
class SimLabel:
    vehicle_id: int
    gamma: float = math.inf

    def __post_init__(self):
        if math.isfinite(self.gamma) and self.gamma < 1:
            raise ValueError("gamma must be >= 1 when finite")

    @property
    def abnormal(self) -> bool:
        return math.isfinite(self.gamma)


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane: int
    pos: Position2D
    speed: float
    params: DrivingParams
    mode: str = NORMAL
    kind: str = HV


# -- driver models -------------------------------------------------------------

def krauss_speed(v, v_leader, gap, p: DrivingParams, dt, u) -> float:
    """Next speed; ``gap`` is bumper-to-bumper (None without leader), ``u`` ~ U[0,1]."""
    v_max = p.desired_speed
    target = min(v + p.accel * dt, v_max)
    if gap is not None:
        g = max(gap - p.min_gap, 0.0)
        v_safe = v_leader + (g - v_leader * dt) / ((v + v_leader) / (2.0 * p.decel) + dt)
        target = min(target, v_safe)
    return max(0.0, target - p.sigma * p.accel * dt * u)


def bumper_gap(follower_y, leader_y) -> float:
    return leader_y - VEHICLE_LENGTH - follower_y


def krauss_step(follower: VehicleState, leader: Optional[VehicleState], dt: float, rng) -> float:
    u = float(rng.random())
    if leader is None:
        return krauss_speed(follower.speed, 0.0, None, follower.params, dt, u)
    gap = bumper_gap(follower.pos.y, leader.pos.y)
    if gap < 0:
        raise ValueError("leader overlaps follower")
    return krauss_speed(follower.speed, leader.speed, gap, follower.params, dt, u)


def lane_center(lane: int) -> float:
    return (lane + 0.5) * LANE_WIDTH


def _anticipated(v_des, y, lane_vehicles):
    """Speed attainable in a lane: the nearest leader's within the look-ahead."""
    for o in lane_vehicles:
        if o[0] > y:
            if o[0] - y <= LC_LOOKAHEAD:
                return min(v_des, o[1])
            return v_des
    return v_des


def _lane_gaps(y, lane_vehicles):
    """(front gap, leader speed, rear gap, follower speed) in a lane; ``lane_vehicles`` sorted by y."""
    ys = [o[0] for o in lane_vehicles]
    i = bisect.bisect_right(ys, y)
    front = rear = math.inf
    v_front = v_rear = 0.0
    if i < len(ys):
        front = bumper_gap(y, ys[i])
        v_front = lane_vehicles[i][1]
    if i > 0:
        rear = bumper_gap(ys[i - 1], y)
        v_rear = lane_vehicles[i - 1][1]
    return front, v_front, rear, v_rear


def choose_lane(y, v, lane, p: DrivingParams, lanes_view, n_lanes, u) -> str:
    """Discretionary lane choice.

    ``lanes_view[l]`` lists ``(y, speed)`` of other vehicles in lane ``l``
    sorted by ``y``. A change happens when the speed gain, weighted by
    ``lc_speed_gain``, exceeds ``LC_GAIN_THRESHOLD`` and both gaps in the
    target lane are safe; with probability ``lc_sigma * LC_WRONG_TIMING`` the
    timing is wrong (a warranted change is postponed, or one with at least
    half the required gain is taken early).
    """
    here = _anticipated(p.desired_speed, y, lanes_view[lane])
    options = []
    for direction, target in ((LEFT, lane + 1), (RIGHT, lane - 1)):
        if not 0 <= target < n_lanes:
            continue
        front, v_front, rear, v_rear = _lane_gaps(y, lanes_view[target])
        need_rear = p.min_gap + p.lc_cooperative * max(0.0, v_rear - v) * COOP_TIME
        if front < p.min_gap or rear < need_rear:
            continue
        gain = _anticipated(p.desired_speed, y, lanes_view[target]) - here
        options.append((gain, direction))
    if not options:
        return STAY
    gain, direction = max(options, key=lambda o: (o[0], o[1] == LEFT))
    warranted = gain * p.lc_speed_gain > LC_GAIN_THRESHOLD
    wrong_timing = u < p.lc_sigma * LC_WRONG_TIMING
    if warranted and not wrong_timing:
        return direction
    if not warranted and wrong_timing and gain * p.lc_speed_gain > 0.5 * LC_GAIN_THRESHOLD:
        return direction
    return STAY


def lane_change_decision(vehicle: VehicleState, neighbors, rng, n_lanes: int = 5) -> str:
    """Lane decision for ``vehicle`` given surrounding ``VehicleState`` objects."""
    view = [[] for _ in range(n_lanes)]
    for o in neighbors:
        if o.id != vehicle.id:
            view[o.lane].append((o.pos.y, o.speed))
    for lst in view:
        lst.sort()
    return choose_lane(vehicle.pos.y, vehicle.speed, vehicle.lane, vehicle.params, view, n_lanes, float(rng.random()))


def draw_switch_location(rng, road_length: float) -> float:
    return float(rng.uniform(0.2, 0.8)) * road_length


def schedule_switch(vehicle_id: int, t, y, location: Optional[float]) -> SimLabel:
    """Label from a replayed track: gamma is the first sample with y >= location."""
    if location is None:
        return SimLabel(vehicle_id)
    y = np.asarray(y)
    hit = np.flatnonzero(y >= location)
    if len(hit) == 0:
        return SimLabel(vehicle_id)
    return SimLabel(vehicle_id, int(np.asarray(t)[hit[0]]))


# -- scenario ------------------------------------------------------------------

@dataclass
class Arrival:
    vid: int
    step: int
    lane: int
    kind: str
    params: DrivingParams
    abnormal_params: Optional[DrivingParams] = None
    switch_location: Optional[float] = None
    speed: Optional[float] = None


def plan_arrivals(config: ScenarioConfig, rng) -> list[Arrival]:
    """Poisson arrivals over the whole horizon; kinds, lanes and mode switches."""
    rate = config.volume / 3600.0
    times = []
    if rate > 0:
        t = 0.0
        while True:
            t += rng.exponential(1.0 / rate)
            if t >= config.duration:
                break
            times.append(t)
    n = len(times)
    lanes = rng.integers(0, config.lanes, n)
    is_av = rng.random(n) < config.av_share
    hv_idx = np.flatnonzero(~is_av)
    n_abn = int(round(config.abnormal_fraction * len(hv_idx)))
    flagged = set(rng.choice(hv_idx, n_abn, replace=False).tolist()) if n_abn else set()
    normal = NORMAL_PARAMS[config.road_type]
    options = ABNORMAL_PARAMS[config.road_type]
    out = []
    for i, t in enumerate(times):
        a = Arrival(i, int(math.ceil(t / config.dt)), int(lanes[i]), AV if is_av[i] else HV, normal)
        if i in flagged:
            a.abnormal_params = options[int(rng.integers(0, len(options)))]
            a.switch_location = draw_switch_location(rng, config.road_length)
        out.append(a)
    return out


class _Veh:
    __slots__ = ("vid", "kind", "lane", "x", "y", "v", "p", "abn", "loc", "mode",
                 "lc_from", "lc_to", "lc_t", "rec", "enter", "gamma", "y_old", "v_old")

    def __init__(self, a: Arrival, y, v, t):
        self.vid, self.kind, self.lane = a.vid, a.kind, a.lane
        self.x, self.y, self.v, self.p = lane_center(a.lane), y, v, a.params
        self.abn, self.loc, self.mode = a.abnormal_params, a.switch_location, NORMAL
        self.lc_from = self.lc_to = self.x
        self.lc_t = math.inf
        self.rec = []
        self.enter = t
        self.gamma = math.inf


@dataclass
class VehicleTrack:
    vid: int
    kind: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    lane: np.ndarray
    abnormal: np.ndarray  # per-sample mode flag
    flagged: bool
    switch_location: Optional[float]
    exited: bool
    abnormal_max_speed: Optional[float] = None

    @property
    def t_enter(self) -> int:
        return int(self.t[0])

    @property
    def t_exit(self) -> int:
        return int(self.t[-1])

    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])


@dataclass
class SimResult:
    config: ScenarioConfig
    tracks: dict = field(repr=False)
    labels: dict = field(repr=False)
    unplaced: int = 0  # arrivals still queued at the end

    def trajectory_rows(self):
        for vid in sorted(self.tracks):
            tr = self.tracks[vid]
            for t, x, y in zip(tr.t.tolist(), tr.x.tolist(), tr.y.tolist()):
                yield vid, t, x, y

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_trajectories_csv(os.path.join(out_dir, "trajectories.csv"), self.trajectory_rows())
        with open(os.path.join(out_dir, "labels.csv"), "w") as fh:
            fh.write("vehicle_id,gamma\n")
            for vid in sorted(self.labels):
                g = self.labels[vid].gamma
                fh.write(f"{vid},{int(g) if math.isfinite(g) else 'inf'}\n")
        with open(os.path.join(out_dir, "vehicles.csv"), "w") as fh:
            fh.write("vehicle_id,kind,flagged,abnormal_max_speed,switch_location,t_enter,t_exit,exited\n")
            for vid in sorted(self.tracks):
                tr = self.tracks[vid]
                loc = "" if tr.switch_location is None else f"{tr.switch_location:.9g}"
                fh.write(f"{vid},{tr.kind},{int(tr.flagged)},{_abn_speed(tr)},{loc},{tr.t_enter},{tr.t_exit},{int(tr.exited)}\n")
        with open(os.path.join(out_dir, "scenario.cfg"), "w") as fh:
            fh.write(self.config.to_text())


def read_result(out_dir, trajectories=None) -> SimResult:
    """Load a directory written by ``SimResult.write``.

    Positions come back at the CSV's precision; speeds are rebuilt by
    backward differences and lanes from the lateral position.
    """
    config = ScenarioConfig.from_file(os.path.join(out_dir, "scenario.cfg"))
    arrays = load_trajectory_arrays(trajectories or os.path.join(out_dir, "trajectories.csv"))
    labels = {}
    with open(os.path.join(out_dir, "labels.csv")) as fh:
        next(fh)
        for line in fh:
            vid, g = line.strip().split(",")
            labels[int(vid)] = SimLabel(int(vid), float(g))
    tracks = {}
    with open(os.path.join(out_dir, "vehicles.csv")) as fh:
        next(fh)
        for line in fh:
            vid, kind, flagged, amax, loc, _, _, exited = line.strip().split(",")
            vid = int(vid)
            if vid not in arrays:
                continue
            t, xy = arrays[vid]
            speed = np.concatenate([[0.0], np.diff(xy[:, 1]) / config.dt]) if len(t) > 1 else np.zeros(len(t))
            if len(t) > 1:
                speed[0] = speed[1]
            lane = np.clip((xy[:, 0] // LANE_WIDTH).astype(int), 0, config.lanes - 1)
            gamma = labels.get(vid, SimLabel(vid)).gamma
            tracks[vid] = VehicleTrack(vid, kind, t, xy[:, 0].copy(), xy[:, 1].copy(), speed, lane, t >= gamma,
                                       bool(int(flagged)), float(loc) if loc else None, bool(int(exited)),
                                       float(amax) if amax else None)
    return SimResult(config, tracks, {v: labels[v] for v in sorted(labels) if v in tracks})


def _abn_speed(tr):
    return "" if tr.abnormal_max_speed is None else f"{tr.abnormal_max_speed:g}"


def run_scenario(config: ScenarioConfig, arrivals: Optional[list[Arrival]] = None) -> SimResult:
    """Simulate ``config``; a pure function of the config (seed included)."""
    ss = np.random.SeedSequence(config.seed)
    plan_rng, drive_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if arrivals is None:
        arrivals = plan_arrivals(config, plan_rng)
    arrivals = sorted(arrivals, key=lambda a: (a.step, a.vid))
    dt, n_lanes, road = config.dt, config.lanes, config.road_length
    active: list[_Veh] = []
    done: list[_Veh] = []
    queue: list[Arrival] = []
    nxt = 0
    lc_steps = LC_DURATION / dt

    for t in range(config.n_steps + 1):
        if t > 0:
            by_lane = [[] for _ in range(n_lanes)]
            for veh in active:
                by_lane[veh.lane].append(veh)
            # longitudinal update, front to back so each leader moves first
            for lane_list in by_lane:
                lane_list.sort(key=lambda o: -o.y)
                lead = None
                for veh in lane_list:
                    u = drive_rng.random()
                    if lead is None:
                        nv = krauss_speed(veh.v, 0.0, None, veh.p, dt, u)
                    else:
                        gap = bumper_gap(veh.y, lead.y_old)
                        nv = krauss_speed(veh.v, lead.v_old, gap, veh.p, dt, u)
                        # never overrun the leader's new rear bumper
                        room = bumper_gap(veh.y, lead.y) / dt
                        if nv > room:
                            nv = max(room, 0.0)
                    veh.y_old, veh.v_old = veh.y, veh.v
                    veh.v = nv
                    veh.y += nv * dt
                    lead = veh
            for veh in active:
                if veh.lc_t < lc_steps:
                    veh.lc_t += 1
                    s = veh.lc_t / lc_steps
                    veh.x = veh.lc_from + (veh.lc_to - veh.lc_from) * 0.5 * (1 - math.cos(math.pi * s))
                if veh.abn is not None and veh.mode == NORMAL and veh.y >= veh.loc:
                    veh.mode, veh.p, veh.gamma = ABNORMAL, veh.abn, t
            still = []
            for veh in active:
                (done if veh.y > road else still).append(veh)
            active = still
            _lane_changes(active, n_lanes, drive_rng, lc_steps)
        # insertion
        while nxt < len(arrivals) and arrivals[nxt].step <= t:
            queue.append(arrivals[nxt])
            nxt += 1
        if queue:
            queue = _insert(queue, active, n_lanes, t, dt)
        for veh in active:
            veh.rec.append((t, veh.x, veh.y, veh.v, veh.lane, veh.mode == ABNORMAL))

    tracks, labels = {}, {}
    for veh, exited in [(v, True) for v in done] + [(v, False) for v in active]:
        rec = np.array(veh.rec, dtype=float)
        tr = VehicleTrack(
            veh.vid, veh.kind, rec[:, 0].astype(np.int64), rec[:, 1], rec[:, 2], rec[:, 3],
            rec[:, 4].astype(np.int64), rec[:, 5].astype(bool), veh.abn is not None, veh.loc, exited,
            None if veh.abn is None else veh.abn.max_speed,
        )
        tracks[veh.vid] = tr
        labels[veh.vid] = SimLabel(veh.vid, veh.gamma)
    return SimResult(config, tracks, labels, unplaced=len(queue))


def _lane_changes(active, n_lanes, rng, lc_steps):
    view = [[] for _ in range(n_lanes)]
    for veh in active:
        view[veh.lane].append((veh.y, veh.v, veh.vid))
    for lst in view:
        lst.sort()
    for veh in sorted(active, key=lambda o: o.vid):
        u = rng.random()
        if veh.lc_t < lc_steps:
            continue  # manoeuvre in progress
        # own entry is skipped by choose_lane: it only looks strictly ahead in its lane
        choice = choose_lane(veh.y, veh.v, veh.lane, veh.p, view, n_lanes, u)
        if choice == STAY:
            continue
        target = veh.lane + (1 if choice == LEFT else -1)
        view[veh.lane].remove((veh.y, veh.v, veh.vid))
        bisect.insort(view[target], (veh.y, veh.v, veh.vid))
        veh.lane = target
        veh.lc_from, veh.lc_to, veh.lc_t = veh.x, lane_center(target), 0


def _insert(queue, active, n_lanes, t, dt):
    last_y = [math.inf] * n_lanes
    last_v = [0.0] * n_lanes
    for veh in active:
        if veh.y < last_y[veh.lane]:
            last_y[veh.lane], last_v[veh.lane] = veh.y, veh.v
    waiting = []
    for a in queue:
        gaps = [bumper_gap(0.0, last_y[l]) for l in range(n_lanes)]
        lane = a.lane
        if gaps[lane] < a.params.min_gap:
            best = max(range(n_lanes), key=lambda l: (gaps[l], -l))
            if gaps[best] < a.params.min_gap:
                waiting.append(a)
                continue
            lane = best
        v = a.params.desired_speed if a.speed is None else a.speed
        if math.isfinite(gaps[lane]):
            g = max(gaps[lane] - a.params.min_gap, 0.0)
            vl = last_v[lane]
            v_safe = vl + (g - vl * dt) / ((v + vl) / (2 * a.params.decel) + dt)
            v = max(0.0, min(v, v_safe))
        placed = replace(a, lane=lane)
        veh = _Veh(placed, 0.0, v, t)
        active.append(veh)
        last_y[lane], last_v[lane] = 0.0, v
    return waiting

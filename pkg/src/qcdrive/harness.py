"""End-to-end experiments: simulate, fuse, train, calibrate, detect, score.

An :class:`ExperimentContext` owns everything that several experiments on
the same scenario can share (the simulated run, the sensing scene, the
trained predictor, fused inputs and error streams), so a sweep over
detectors and noise levels only pays for each piece once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .predict import (AttentionWeights, PredictorConfig, TrainingSample, cv_params, init_weights, predict, train)
from .predict import checkpoint
from .qcd import ErrorSample, GaussianSpec, calibrate, detect_stream, make_config
from .qcd.detectors import KINDS
from .sensing import FusionError, NoiseLevel, Scene
from .sim import HV, ScenarioConfig, SimResult, run_scenario

CV, MEATP = "cv", "meatp"
PREDICTORS = (CV, MEATP)
STRIDE = 2  # 10 Hz simulation, 5 Hz prediction
CSV_COLUMNS = ("predictor", "detector", "noise_level", "detected", "false_alarm", "add", "rate",
               "sharing", "missed", "n_abnormal", "n_vehicles", "add_seconds", "fusion_failures", "status")


def split_of(vid: int) -> str:
    """'train' or 'test', roughly 7:3, from a hash of the vehicle id."""
    h = hashlib.sha256(str(vid).encode()).digest()
    return "train" if int.from_bytes(h[:4], "big") % 10 < 7 else "test"


@dataclass(frozen=True)
class TrainingPlan:
    n_vehicles: int = 200
    every: int = 2  # use every n-th prediction time of each vehicle
    levels: tuple = (0, 1, 2, 3, 4)
    steps: int = 3000
    batch_size: int = 64
    schedule: str = "cosine"

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(x) for x in self.levels))
        if self.n_vehicles < 1 or self.every < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("training plan counts must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    noise_level: int = 0
    predictor: str = MEATP
    sharing: bool = True
    detector: str = "cusum"
    alpha: float = 0.01
    b: Optional[float] = None
    n_eval_vehicles: int = 300
    n_calib_vehicles: int = 200
    horizon: int = 1  # prediction steps ahead that are scored
    seed: int = 0
    predictor_config: PredictorConfig = field(default_factory=PredictorConfig)
    training: TrainingPlan = field(default_factory=TrainingPlan)
    model_path: Optional[str] = None  # load a checkpoint instead of training
    fg: Optional[tuple] = None  # fixed (f, g) GaussianSpecs instead of calibrating

    def __post_init__(self):
        if not 0 <= self.noise_level <= 4:
            raise ValueError("noise_level must be in 0..4")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        if self.detector not in KINDS:
            raise ValueError(f"detector must be one of {KINDS}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.b is not None and not self.b > 0:
            raise ValueError("b must be positive")
        if self.n_eval_vehicles < 1 or self.n_calib_vehicles < 2:
            raise ValueError("vehicle counts too small")
        if not 1 <= self.horizon <= self.predictor_config.t_f:
            raise ValueError("horizon must lie in 1..t_f")

    @property
    def label(self) -> str:
        return self.predictor + ("+share" if self.sharing else "")

    def context_key(self) -> tuple:
        return (self.scenario.to_text(), self.seed, json.dumps(self.predictor_config.to_dict(), sort_keys=True),
                self.training, self.model_path, self.n_eval_vehicles, self.n_calib_vehicles)


@dataclass
class ResultRow:
    predictor: str
    detector: str
    noise_level: int
    sharing: bool
    detected: int = 0
    false_alarm: int = 0
    missed: int = 0
    n_abnormal: int = 0
    n_vehicles: int = 0
    add: float = math.nan  # samples
    add_seconds: float = math.nan
    fusion_failures: int = 0
    status: str = "ok"
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def detection_rate(self) -> Optional[float]:
        return self.detected / self.n_abnormal if self.n_abnormal else None

    @property
    def false_alarm_rate(self) -> Optional[float]:
        return self.false_alarm / self.n_vehicles if self.n_vehicles else None

    def csv_row(self) -> list:
        def num(x, fmt):
            return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, fmt)
        return [self.predictor, self.detector, self.noise_level, self.detected, self.false_alarm,
                num(self.add, ".4f"), num(self.detection_rate, ".4f"), int(self.sharing), self.missed,
                self.n_abnormal, self.n_vehicles, num(self.add_seconds, ".4f"), self.fusion_failures, self.status]


@dataclass
class Stream:
    """Scored errors for one vehicle. ``n`` is the 1-based prediction-time index."""

    vid: int
    n: np.ndarray
    e: np.ndarray
    gamma: float  # first n whose scored position lies at or after the switch; inf if none
    failures: int

    def samples(self):
        return [ErrorSample(int(n), float(e)) for n, e in zip(self.n, self.e)]

    def pre(self) -> np.ndarray:
        return self.e[self.n < self.gamma]

    def post(self) -> np.ndarray:
        return self.e[self.n >= self.gamma]


def classify(tau, gamma) -> str:
    """'detected', 'false_alarm', 'missed' or 'quiet' (normal vehicle, no stop)."""
    if tau is not None and tau < gamma:
        return "false_alarm"
    if math.isinf(gamma):
        return "quiet"
    return "detected" if tau is not None else "missed"


def autocorrelation(e: np.ndarray, lag: int = 1) -> float:
    if len(e) <= lag + 1 or np.std(e) == 0:
        return math.nan
    return float(np.corrcoef(e[:-lag], e[lag:])[0, 1])


class ExperimentContext:
    """Shared state for every experiment on one scenario and seed."""

    INPUT_CACHE = 600  # vehicle streams of fused inputs kept in memory

    def __init__(self, config: ExperimentConfig, result: SimResult | None = None, log=None):
        self.config = config
        self.log = log or (lambda msg: None)
        self._result = result
        self._scene = None
        self._model = None
        self._inputs = OrderedDict()  # (vid, noise, sharing) -> inputs, least recently used first
        self._streams = {}
        self._calib = {}

    # data
    @property
    def result(self) -> SimResult:
        if self._result is None:
            t = time.perf_counter()
            self._result = run_scenario(self.config.scenario)
            self.log(f"simulated {len(self._result.tracks)} vehicles in {time.perf_counter() - t:.1f}s")
        return self._result

    @property
    def scene(self) -> Scene:
        if self._scene is None:
            self._scene = Scene(self.result, STRIDE, self.config.predictor_config.t_h, seed=self.config.seed)
        return self._scene

    def _hvs(self, split: str) -> tuple[list, list]:
        """Exited human-driven vehicles of a split, as (flagged, unflagged) id lists."""
        tr = self.result.tracks
        vs = [v for v in sorted(tr) if tr[v].kind == HV and tr[v].exited and split_of(v) == split]
        return [v for v in vs if tr[v].flagged], [v for v in vs if not tr[v].flagged]

    def eval_vehicles(self) -> list:
        """Test-split vehicles scheduled to switch mode, topped up with normal ones."""
        flagged, normal = self._hvs("test")
        n = self.config.n_eval_vehicles
        return sorted((flagged + normal)[:n])

    def calib_vehicles(self) -> list:
        flagged, normal = self._hvs("train")
        half = self.config.n_calib_vehicles // 2
        return sorted(flagged[:half] + normal[:self.config.n_calib_vehicles - min(half, len(flagged))])

    def train_vehicles(self) -> list:
        _, normal = self._hvs("train")
        return normal[-self.config.training.n_vehicles:]

    # model
    def model(self) -> tuple[AttentionWeights, PredictorConfig]:
        if self._model is None:
            cfg = self.config
            if cfg.model_path:
                w, pcfg, _ = checkpoint.load(cfg.model_path)
                self._model = (w, pcfg)
            else:
                self._model = (self.train_model(), cfg.predictor_config)
        return self._model

    def training_samples(self) -> list:
        plan, pcfg = self.config.training, self.config.predictor_config
        sc = self.scene
        out = []
        k = 0
        for v in self.train_vehicles():
            for t0 in sc.prediction_times(v, pcfg.t_f)[::plan.every].tolist():
                noise = NoiseLevel.of(plan.levels[k % len(plan.levels)])
                k += 1
                try:
                    fi = sc.fused_input(v, t0, noise, sharing=True)
                except FusionError:
                    continue
                out.append(TrainingSample(fi, fi.frame.apply(sc.future(v, t0, pcfg.t_f))))
        return out

    def train_model(self) -> AttentionWeights:
        plan, pcfg = self.config.training, self.config.predictor_config
        t = time.perf_counter()
        samples = self.training_samples()
        self.log(f"training on {len(samples)} samples")
        w = train(samples, pcfg, steps=plan.steps, batch_size=plan.batch_size, weights=init_weights(pcfg),
                  log=self.log, schedule=plan.schedule)
        self.log(f"trained: loss {w.meta['initial_loss']:.3f} -> {w.meta['final_loss']:.3f} "
                 f"in {time.perf_counter() - t:.1f}s")
        return w

    def set_model(self, weights: AttentionWeights, pcfg: PredictorConfig) -> None:
        self._model = (weights, pcfg)
        self._streams = {k: v for k, v in self._streams.items() if k[0] != MEATP}
        self._calib = {k: v for k, v in self._calib.items() if k[0] != MEATP}

    # streams
    def prefetch(self, vids, noise_level: int, sharing: bool) -> None:
        """Fuse inputs for ``vids`` in time order, so vehicles on the road
        together reuse the same shared messages."""
        sc = self.scene
        noise = NoiseLevel.of(noise_level)
        todo = [v for v in vids if (v, noise_level, sharing) not in self._inputs]
        jobs = sorted((t0, v, i) for v in todo for i, t0 in enumerate(sc.prediction_times(v, 0).tolist()))
        got = {v: [] for v in todo}
        for t0, v, i in jobs:
            try:
                fi = sc.fused_input(v, t0, noise, sharing)
            except FusionError:
                fi = None
            got[v].append((i + 1, t0, fi))
        for v in todo:
            self._inputs[(v, noise_level, sharing)] = got[v]
            while len(self._inputs) > self.INPUT_CACHE:
                self._inputs.popitem(last=False)

    def inputs(self, vid: int, noise_level: int, sharing: bool, horizon: int) -> list:
        """(n, t0, FusedInput or None) for each prediction time of ``vid``."""
        key = (vid, noise_level, sharing)
        if key not in self._inputs:
            self.prefetch([vid], noise_level, sharing)
        self._inputs.move_to_end(key)
        hit = self._inputs[key]
        last = self.result.tracks[vid].t_exit - STRIDE * horizon
        return [x for x in hit if x[1] <= last]

    def streams(self, predictor: str, noise_level: int, sharing: bool, horizon: int, vids) -> dict:
        """Error streams at ``horizon`` for ``vids`` (cached per configuration and vehicle)."""
        out, todo = {}, []
        for v in vids:
            s = self._streams.get((predictor, noise_level, sharing, horizon, v))
            if s is None:
                todo.append(v)
            else:
                out[v] = s
        step = self.INPUT_CACHE // 2
        for i in range(0, len(todo), step):
            out.update(self._streams_chunk(predictor, noise_level, sharing, horizon, todo[i:i + step]))
        return out

    def _streams_chunk(self, predictor, noise_level, sharing, horizon, todo) -> dict:
        out = {}
        self.prefetch(todo, noise_level, sharing)
        sc = self.scene
        rows, times = [], {}
        for v in todo:
            got = self.inputs(v, noise_level, sharing, horizon)
            times[v] = [(n, t0, fi is None) for n, t0, fi in got]
            rows.extend((v, n, t0, fi) for n, t0, fi in got if fi is not None)
        fis = [r[3] for r in rows]
        if predictor == CV:
            hist = np.stack([fi.tv_history.positions for fi in fis]) if fis else np.empty((0, 1, 2))
            mu = cv_params(hist, horizon)[:, horizon - 1, :2] if fis else np.empty((0, 2))
        else:
            w, pcfg = self.model()
            mu = predict(fis, w, pcfg, n_steps=horizon)[:, horizon - 1, :2] if fis else np.empty((0, 2))
        z = np.array([fi.frame.apply(sc.future(v, t0, horizon)[-1:])[0] for v, _, t0, fi in rows]).reshape(-1, 2)
        err = np.hypot(*(z - mu).T) if len(rows) else np.empty(0)
        per = {v: ([], []) for v in todo}
        for (v, n, _, _), e in zip(rows, err):
            per[v][0].append(n)
            per[v][1].append(e)
        for v in todo:
            gt = self.result.labels[v].gamma
            gam = math.inf
            if gt is not None and math.isfinite(gt):
                gam = next((n for n, t0, _ in times[v] if t0 + STRIDE * horizon >= gt), math.inf)
            s = Stream(v, np.array(per[v][0], dtype=int), np.array(per[v][1], dtype=float), gam,
                       sum(failed for _, _, failed in times[v]))
            self._streams[(predictor, noise_level, sharing, horizon, v)] = s
            out[v] = s
        return out

    def calibration(self, predictor: str, noise_level: int, sharing: bool, horizon: int) -> tuple:
        """(f, g) fitted on the calibration vehicles: pre-switch errors and post-switch errors."""
        key = (predictor, noise_level, sharing, horizon)
        if key not in self._calib:
            st = self.streams(predictor, noise_level, sharing, horizon, self.calib_vehicles())
            pre = np.concatenate([s.pre() for s in st.values()])
            post = np.concatenate([s.post() for s in st.values()])
            if len(pre) < 2 or len(post) < 2:
                raise ValueError("not enough calibration samples")
            self._calib[key] = (calibrate(pre), calibrate(post))
        return self._calib[key]


_CONTEXTS: dict = {}


def context_for(config: ExperimentConfig, log=None) -> ExperimentContext:
    key = config.context_key()
    ctx = _CONTEXTS.get(key)
    if ctx is None:
        ctx = _CONTEXTS[key] = ExperimentContext(config, log=log)
    elif log is not None:
        ctx.log = log
    return ctx


def clear_contexts() -> None:
    _CONTEXTS.clear()


def run_experiment(config: ExperimentConfig, context: ExperimentContext | None = None, log=None) -> ResultRow:
    ctx = context or context_for(config, log)
    f, g = config.fg or ctx.calibration(config.predictor, config.noise_level, config.sharing, config.horizon)
    det = make_config(config.detector, f, g, alpha=config.alpha, b=config.b)
    streams = ctx.streams(config.predictor, config.noise_level, config.sharing, config.horizon,
                          ctx.eval_vehicles())
    row = ResultRow(config.predictor, config.detector, config.noise_level, config.sharing)
    delays, outcomes, censored = [], {}, 0
    for v, s in sorted(streams.items()):
        tau, _ = detect_stream(s.samples(), det)
        kind = classify(tau, s.gamma)
        outcomes[v] = {"tau": tau, "gamma": s.gamma, "outcome": kind}
        row.n_vehicles += 1
        row.fusion_failures += s.failures
        if math.isfinite(s.gamma):
            row.n_abnormal += 1
        if kind == "false_alarm":
            row.false_alarm += 1
            if math.isfinite(s.gamma):
                row.missed += 1
        elif kind == "detected":
            row.detected += 1
            delays.append(tau - s.gamma)
        elif kind == "missed":
            row.missed += 1
            censored += 1
    if delays:
        row.add = float(np.mean(delays))
        row.add_seconds = row.add * STRIDE * config.scenario.dt
    pre = np.concatenate([s.pre() for s in streams.values()]) if streams else np.empty(0)
    row.diagnostics = {
        "f": asdict(f), "g": asdict(g), "threshold": det.threshold,
        "samples": int(sum(len(s.e) for s in streams.values())),
        "fusion_failures": row.fusion_failures,
        "exit_censored": censored,
        "exit_censoring_rate": censored / row.n_abnormal if row.n_abnormal else None,
        "lag1_autocorrelation": autocorrelation(pre),
        "vehicles": outcomes,
    }
    return row


def failure_row(config: ExperimentConfig, err: Exception) -> ResultRow:
    msg = f"failed: {type(err).__name__}: {err}".replace("\n", " ").replace(",", ";")
    return ResultRow(config.predictor, config.detector, config.noise_level, config.sharing, status=msg)


def sweep(configs, log=None) -> list:
    """One ResultRow per config, in input order; failures become marked rows."""
    configs = list(configs)
    if not configs:
        raise ValueError("sweep needs at least one config")
    rows = []
    for c in configs:
        try:
            rows.append(run_experiment(c, log=log))
        except Exception as err:  # noqa: BLE001 - a failed run must not stop the sweep
            rows.append(failure_row(c, err))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))


def grid_configs(base: ExperimentConfig, predictors=((CV, False), (MEATP, True)),
                   detectors=KINDS, levels=range(5)) -> list:
    """Predictor x detector x noise grid in a stable order."""
    return [replace(base, predictor=p, sharing=s, detector=d, noise_level=lv)
            for p, s in predictors for d in detectors for lv in levels]


def distribution_table(ctx: ExperimentContext, predictor: str, noise_level: int = 0, sharing: bool = True,
                       horizons=(5, 10, 15)) -> list:
    """Calibrated (normal, abnormal) error distributions per horizon."""
    out = []
    for h in horizons:
        f, g = ctx.calibration(predictor, noise_level, sharing, h)
        out.append({"horizon": h, "seconds": h * STRIDE * ctx.config.scenario.dt,
                    "normal": GaussianSpec(f.mu, f.sigma), "abnormal": GaussianSpec(g.mu, g.sigma)})
    return out

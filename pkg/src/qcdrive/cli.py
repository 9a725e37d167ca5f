"""Command line: simulate, train, calibrate, detect, eval, sweep.

Every subcommand takes ``--seed`` and writes CSV or JSON files whose bytes
depend only on its inputs and arguments. A short summary goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace

from . import harness as H
from .predict import PredictorConfig, checkpoint
from .qcd import GaussianSpec, detect_stream, make_config
from .qcd.detectors import KINDS
from .sim import ScenarioConfig, read_result, run_scenario

INVARIANT_EXIT = 3


def _json_dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if hasattr(x, "item"):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else ("inf" if obj > 0 else "-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# -- argument helpers -------------------------------------------------------------

SCENARIO_FLAGS = {"lanes": int, "road_length": float, "volume": float, "duration": float, "n_av": int,
                  "n_hv": int, "abnormal_fraction": float, "dt": float, "road_type": str}


def _scenario(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_file(args.config) if args.config else ScenarioConfig()
    over = {k: getattr(args, k) for k in SCENARIO_FLAGS if getattr(args, k) is not None}
    return replace(cfg, seed=args.seed, **over)


def _experiment(args, result, **kw) -> H.ExperimentConfig:
    model = getattr(args, "model", None)
    plan = H.TrainingPlan(steps=getattr(args, "steps", None) or H.TrainingPlan.steps,
                          n_vehicles=getattr(args, "train_vehicles", None) or H.TrainingPlan.n_vehicles)
    base = dict(scenario=result.config, seed=args.seed, n_eval_vehicles=getattr(args, "vehicles", 300),
                n_calib_vehicles=getattr(args, "calib_vehicles", 200),
                predictor_config=PredictorConfig(seed=args.seed), training=plan,
                model_path=model if model and model != H.CV else None,
                horizon=getattr(args, "horizon", 1))
    base.update(kw)
    return H.ExperimentConfig(**base)


def _predictor(args) -> str:
    return H.CV if getattr(args, "model", None) == H.CV or getattr(args, "predictor", None) == H.CV else H.MEATP


def _context(args, result, log) -> H.ExperimentContext:
    return H.ExperimentContext(_experiment(args, result), result=result, log=log)


def _log(args):
    return (lambda m: print(m, file=sys.stderr)) if getattr(args, "verbose", False) else None


def _check_row(row: H.ResultRow) -> list:
    bad = []
    if row.status != "ok":
        return bad
    if row.detected + row.missed != row.n_abnormal:
        bad.append(f"detected + missed != abnormal for {row.predictor}/{row.detector}/L{row.noise_level}")
    if row.detected > row.n_abnormal or row.false_alarm > row.n_vehicles:
        bad.append(f"counts exceed population for {row.predictor}/{row.detector}/L{row.noise_level}")
    return bad


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    res = run_scenario(cfg)
    res.write(args.out)
    n_ab = sum(lb.abnormal for lb in res.labels.values())
    print(f"simulated {len(res.tracks)} vehicles, {n_ab} switched mode, {res.unplaced} not placed -> {args.out}")
    return 0


def cmd_train(args) -> int:
    result = read_result(args.sim)
    ctx = _context(args, result, _log(args))
    w = ctx.train_model()
    extra = {"scenario": result.config.to_text(), "steps": ctx.config.training.steps,
             "initial_loss": w.meta["initial_loss"], "final_loss": w.meta["final_loss"]}
    w.meta.pop("history", None)
    checkpoint.save(args.out, w, ctx.config.predictor_config, extra)
    print(f"trained MEATP: loss {w.meta['initial_loss']:.4f} -> {w.meta['final_loss']:.4f} -> {args.out}")
    return 0


def _calibration(ctx, args, predictor):
    f, g = ctx.calibration(predictor, args.noise, args.sharing, args.horizon)
    return f, g


def cmd_calibrate(args) -> int:
    result = read_result(args.sim)
    ctx = _context(args, result, _log(args))
    pred = _predictor(args)
    f, g = _calibration(ctx, args, pred)
    out = {"predictor": pred, "noise_level": args.noise, "sharing": args.sharing, "horizon": args.horizon,
           "seconds": args.horizon * H.STRIDE * result.config.dt, "f": asdict(f), "g": asdict(g)}
    _json_dump(args.out, out)
    print(f"{pred} L{args.noise} h={args.horizon}: normal {f.mu:.4f}/{f.sigma:.4f}  "
          f"abnormal {g.mu:.4f}/{g.sigma:.4f} -> {args.out}")
    return 0


def _load_calib(path):
    with open(path) as fh:
        d = json.load(fh)
    return GaussianSpec(**d["f"]), GaussianSpec(**d["g"])


def cmd_detect(args) -> int:
    sim_dir = args.sim or os.path.dirname(os.path.abspath(args.traj))
    result = read_result(sim_dir, trajectories=args.traj)
    ctx = _context(args, result, _log(args))
    pred = _predictor(args)
    f, g = _load_calib(args.calib) if args.calib else _calibration(ctx, args, pred)
    det = make_config(args.detector, f, g, alpha=args.alpha, b=args.b)
    streams = ctx.streams(pred, args.noise, args.sharing, args.horizon, ctx.eval_vehicles())
    counts = {"detected": 0, "false_alarm": 0, "missed": 0, "quiet": 0}
    trace_rows = []
    with open(args.out, "w") as fh:
        fh.write("vehicle_id,tau,gamma,delay,false_alarm\n")
        for v, s in sorted(streams.items()):
            tau, trace = detect_stream(s.samples(), det)
            kind = H.classify(tau, s.gamma)
            counts[kind] += 1
            delay = tau - s.gamma if kind == "detected" else ""
            g_txt = "inf" if math.isinf(s.gamma) else int(s.gamma)
            fh.write(f"{v},{'' if tau is None else tau},{g_txt},{delay},{int(kind == 'false_alarm')}\n")
            if args.trace:
                trace_rows.extend((v, int(n), w) for n, w in zip(s.n[:len(trace)], trace))
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write("vehicle_id,n,W\n")
            for v, n, w in trace_rows:
                fh.write(f"{v},{n},{w:.9g}\n")
    print(f"{args.detector} b={det.threshold:.4f}: " + ", ".join(f"{k} {v}" for k, v in counts.items())
          + f" -> {args.out}")
    return 0


def _row_json(row: H.ResultRow, keep_vehicles=True) -> dict:
    d = {k: v for k, v in asdict(row).items() if k != "diagnostics"}
    d["detection_rate"] = row.detection_rate
    d["false_alarm_rate"] = row.false_alarm_rate
    diag = dict(row.diagnostics)
    if not keep_vehicles:
        diag.pop("vehicles", None)
    d["diagnostics"] = diag
    return _clean(d)


def _summary(row: H.ResultRow) -> str:
    rate = "n/a" if row.detection_rate is None else f"{row.detection_rate:.3f}"
    return (f"{row.predictor}{'+share' if row.sharing else ''} {row.detector} L{row.noise_level}: "
            f"rate {rate} ({row.detected}/{row.n_abnormal}), false alarms {row.false_alarm}/{row.n_vehicles}, "
            f"ADD {row.add:.2f} samples, status {row.status}")


def cmd_eval(args) -> int:
    result = read_result(args.sim)
    ctx = _context(args, result, _log(args))
    cfg = replace(ctx.config, predictor=_predictor(args), sharing=args.sharing, detector=args.detector,
                  noise_level=args.noise, alpha=args.alpha, b=args.b)
    row = H.run_experiment(cfg, ctx)
    _json_dump(args.out, _row_json(row))
    print(_summary(row))
    bad = _check_row(row)
    for msg in bad:
        print("invariant violated: " + msg, file=sys.stderr)
    return INVARIANT_EXIT if bad else 0


def _parse_levels(text: str) -> list:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _parse_predictors(text: str) -> list:
    out = []
    for p in text.split(","):
        name, _, share = p.partition("+")
        if name not in H.PREDICTORS or share not in ("", "share"):
            raise argparse.ArgumentTypeError(f"bad predictor {p!r}; use cv, meatp, cv+share or meatp+share")
        out.append((name, share == "share"))
    return out


def cmd_sweep(args) -> int:
    result = read_result(args.sim)
    log = _log(args)
    ctx = _context(args, result, log)
    base = replace(ctx.config, alpha=args.alpha, b=args.b)
    configs = H.grid_configs(base, _parse_predictors(args.predictors), args.detectors.split(","),
                               _parse_levels(args.levels))
    rows = []
    for c in configs:
        try:
            rows.append(H.run_experiment(c, ctx))
        except Exception as err:  # noqa: BLE001 - keep sweeping, record the failure
            rows.append(H.failure_row(c, err))
    H.write_csv(args.out, rows)
    bad = []
    for r in rows:
        print(_summary(r))
        bad += _check_row(r)
    for msg in bad:
        print("invariant violated: " + msg, file=sys.stderr)
    return INVARIANT_EXIT if bad else 0


# -- parser -----------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcdrive", description="Abnormal driving-mode detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--verbose", action="store_true", help="progress messages on stderr")

    def pipeline(sp, model_required=False):
        sp.add_argument("--model", required=model_required, help="checkpoint path, or 'cv' for constant velocity")
        sp.add_argument("--noise", type=int, default=0, choices=range(5))
        sp.add_argument("--sharing", type=_bool, default=True)
        sp.add_argument("--horizon", type=int, default=1, help="prediction steps ahead (0.2 s each)")
        sp.add_argument("--vehicles", type=int, default=300, help="vehicles evaluated")
        sp.add_argument("--calib-vehicles", type=int, default=200)
        sp.add_argument("--steps", type=int, help="training steps when no checkpoint is given")
        sp.add_argument("--train-vehicles", type=int)

    s = sub.add_parser("simulate", help="run the traffic simulator")
    common(s)
    s.add_argument("--config", help="scenario file (key=value lines)")
    for k, typ in SCENARIO_FLAGS.items():
        s.add_argument("--" + k.replace("_", "-"), dest=k, type=typ)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the attention predictor on normal vehicles")
    common(s)
    s.add_argument("--sim", required=True, help="directory written by simulate")
    s.add_argument("--steps", type=int)
    s.add_argument("--train-vehicles", type=int)
    s.add_argument("--out", required=True, help="checkpoint JSON")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="fit normal/abnormal error distributions")
    common(s)
    s.add_argument("--sim", required=True)
    s.add_argument("--predictor", choices=H.PREDICTORS)
    pipeline(s)
    s.add_argument("--out", required=True, help="calibration JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect", help="run a detector over every evaluated vehicle")
    common(s)
    s.add_argument("--traj", required=True, help="trajectories.csv from simulate")
    s.add_argument("--sim", help="simulation directory (defaults to the folder of --traj)")
    pipeline(s, model_required=True)
    s.add_argument("--calib", help="calibration JSON (otherwise fitted on the training split)")
    s.add_argument("--detector", choices=KINDS, default="cusum")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--b", type=float)
    s.add_argument("--trace", help="optional CSV of statistic traces")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="one experiment, result row as JSON")
    common(s)
    s.add_argument("--sim", required=True)
    pipeline(s)
    s.add_argument("--predictor", choices=H.PREDICTORS)
    s.add_argument("--detector", choices=KINDS, default="cusum")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--b", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="predictor x detector x noise grid to CSV")
    common(s)
    s.add_argument("--sim", required=True)
    pipeline(s)
    s.add_argument("--predictors", default="cv,meatp+share")
    s.add_argument("--detectors", default=",".join(KINDS))
    s.add_argument("--levels", default="0-4")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--b", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``mihpo`` command line: identification, comparison and downstream tooling.

Exit codes: 0 success, 2 input error, 3 numeric failure, 64 usage.
Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, fixtures
from .config import ConfigError, OptimizerConfig, load_config, run_method
from .models import (BRAKE_MODEL, ENGINE_CURVE_MODEL, TIRE_MODEL, EngineCurveParams, TireParams, VehicleParams,
                     default_engine_space, default_tire_space, params_from_json, params_to_json)
from .objective import DataError, MSEObjective, SyntheticSpec, generate_synthetic, load_csv
from .optimizer import ParamSpace
from .planning import (ChassisGeometry, ControlDesignError, EngineTorqueMap, LqrGainTable, PlannerParams,
                       build_engine_map, cornering_stiffness, lqr_gain_table, plan_velocity, steady_lateral_limit,
                       tire_peak_force)
from .sim import SimConfig, SimulationError, lap_summary, make_oval, run_lap

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 64

log = logging.getLogger("mihpo")

MODELS = {"tire": TIRE_MODEL, "engine_curve": ENGINE_CURVE_MODEL, "brake": BRAKE_MODEL}


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# --------------------------------------------------------------------------
# Manifest and atomic output


@contextlib.contextmanager
def _atomic(path):
    """Yield a temporary path next to ``path``; move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_json(path, doc) -> None:
    with _atomic(path) as tmp, open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    inputs: dict
    outputs: dict
    seed: int | None
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None

    def write(self, path) -> None:
        self.finished = _now()
        _write_json(path, asdict(self))


# --------------------------------------------------------------------------
# Loaders with fixture fallbacks


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _vehicle(path) -> VehicleParams:
    if path is None:
        return fixtures.VEHICLE
    try:
        return VehicleParams.from_dict(_read_json(path))
    except (TypeError, KeyError) as exc:
        raise InputError(f"{path}: bad vehicle description ({exc})") from exc


def _geometry(path) -> ChassisGeometry:
    if path is None:
        return fixtures.GEOMETRY
    try:
        return ChassisGeometry(**_read_json(path))
    except TypeError as exc:
        raise InputError(f"{path}: bad geometry ({exc})") from exc


def _tire(path, default: TireParams) -> TireParams:
    if path is None:
        return default
    p = _params(path)
    if not isinstance(p, TireParams):
        raise InputError(f"{path}: expected tire parameters")
    return p


def _params(path):
    try:
        return params_from_json(_existing(path))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: bad parameter file ({exc})") from exc


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p


def _planner(args, vp: VehicleParams, mu: float) -> PlannerParams:
    tires = fixtures.WHEEL_TIRES if not args.wheel_tires else [_tire(p, None) for p in args.wheel_tires]
    if len(tires) != 4:
        raise InputError("--wheel-tires takes four files (LF RF LR RR)")
    return PlannerParams(mu, tuple(tire_peak_force(t) for t in tires), vp.nominal_loads, args.v_cap)


def _default_space(model_name: str, data) -> ParamSpace:
    if model_name == "tire":
        return default_tire_space(data)
    if model_name == "engine_curve":
        return default_engine_space(data)
    x, y = data.x, data.outputs
    slope = float(np.dot(x, y) / np.dot(x, x)) if np.dot(x, x) > 0 else 0.0
    scale = abs(slope) or 1.0
    return ParamSpace.from_dicts([{"name": "k_b", "mean": slope, "std": 0.5 * scale,
                                   "min": -5 * scale, "max": 5 * scale}])


def _mu_list(values) -> list[float]:
    mus = [float(v) for v in values]
    for m in mus:
        if not 0 < m <= 1:
            raise InputError(f"mu must be in (0, 1], got {m}")
    return mus


# --------------------------------------------------------------------------
# Commands


def cmd_fit(args) -> int:
    cfg = load_config(args.config) if args.config else OptimizerConfig()
    seed = cfg.seed if args.seed is None else args.seed
    model = MODELS[args.model]
    data = load_csv(_existing(args.data), model.input_names, model.output_name)
    if args.model == "engine_curve" and args.throttle is None:
        raise InputError("engine_curve fits need --throttle")
    space = cfg.space or _default_space(args.model, data)
    if len(space) != len(model.param_names):
        raise ConfigError(f"{args.model} takes {len(model.param_names)} parameters, config lists {len(space)}")

    manifest = RunManifest("fit", sys.argv[1:], args.config, {"data": str(args.data)}, {}, seed)
    report = run_method(cfg.method, cfg, space, MSEObjective(model, data), seed, args.jobs)
    values = report.best_config.values
    if not np.isfinite(report.best_loss):
        raise FloatingPointError("no finite loss found")
    if args.model == "tire":
        params = TireParams.from_array(values)
    elif args.model == "engine_curve":
        params = EngineCurveParams(*values, throttle=args.throttle)
    else:
        params = {"k_b": float(values[0])}

    out = Path(args.out_dir)
    files = {"params": out / "params.json", "report": out / "report.json", "curve": out / "curve.csv"}
    with _atomic(files["params"]) as tmp:
        params_to_json(tmp, args.model, params, report.best_loss)
    with _atomic(files["report"]) as tmp:
        report.write_json(tmp, include_timing=False)
    with _atomic(files["curve"]) as tmp:
        report.write_curve_csv(tmp)
    manifest.outputs = {k: str(v) for k, v in files.items()}
    manifest.write(out / "manifest.json")
    log.info("fit done: loss %.6g after %d evaluations (%.1fs)", report.best_loss,
             report.total_evaluations, report.wall_time_seconds)
    return EXIT_OK


def cmd_generate(args) -> int:
    model = MODELS[args.model]
    if args.truth:
        truth = _params(args.truth)
        truth = list(truth.values()) if isinstance(truth, dict) else truth
    elif args.model == "tire":
        truth = fixtures.TIRE_TRUTH
    elif args.model == "engine_curve":
        truth = fixtures.true_engine_curve(args.throttle)
    else:
        truth = [fixtures.VEHICLE.brake_gain]
    if isinstance(truth, TireParams):
        truth = truth.as_array()
    elif isinstance(truth, EngineCurveParams):
        truth = truth.coefficients
    default_range = {"tire": fixtures.TIRE_ALPHA_RANGE, "engine_curve": (0.1, 1.0), "brake": (0.0, 100.0)}
    lo, hi = args.input_range or default_range[args.model]
    noise = args.noise_std if args.noise_std is not None else (fixtures.TIRE_NOISE_STD if args.model == "tire" else 0.0)
    spec = SyntheticSpec(np.asarray(truth, dtype=float), ((lo, hi),), args.n_samples, noise, args.seed)
    data = generate_synthetic(model, spec)
    with _atomic(args.out) as tmp:
        data.to_csv(tmp)
    RunManifest("generate", sys.argv[1:], None, {"truth": args.truth}, {"data": str(args.out)},
                args.seed).write(f"{args.out}.manifest.json")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config) if args.config else OptimizerConfig()
    base_seed = cfg.seed if args.seed is None else args.seed
    seeds = [base_seed + i for i in range(args.n_seeds)]
    model = MODELS[args.model]
    data = load_csv(_existing(args.data), model.input_names, model.output_name)
    space = cfg.space or _default_space(args.model, data)
    labels = [m.strip() for m in args.methods.split(",") if m.strip()]
    for label in labels:
        cfg.resolve(label)
    objective = MSEObjective(model, data)
    manifest = RunManifest("compare", sys.argv[1:], args.config, {"data": str(args.data)}, {}, base_seed)

    rows, summary = [], {"budget": cfg.budget, "seeds": seeds, "methods": {}}
    for label in labels:
        terminal, to_thr = [], []
        for seed in seeds:
            report = run_method(label, cfg, space, objective, seed, args.jobs)
            rows.extend((label, seed, e, l) for e, l in report.loss_curve)
            terminal.append(report.best_loss)
            if args.threshold is not None:
                to_thr.append(report.evaluations_to_reach(args.threshold))
        entry = {"terminal_losses": terminal, "median_terminal_loss": statistics.median(terminal)}
        if args.threshold is not None:
            entry["evaluations_to_threshold"] = to_thr
        summary["methods"][label] = entry

    with _atomic(args.out) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "evaluations", "best_loss"])
        for label, seed, e, l in rows:
            w.writerow([label, seed, e, repr(float(l))])
    manifest.outputs = {"curves": str(args.out)}
    if args.summary:
        _write_json(args.summary, summary)
        manifest.outputs["summary"] = str(args.summary)
    manifest.write(f"{args.out}.manifest.json")
    return EXIT_OK


def cmd_build_engine_map(args) -> int:
    vp = _vehicle(args.vehicle)
    if args.fixture:
        curves, dyno = fixtures.reference_fitted_curves(), fixtures.dyno_dataset()
    else:
        curves = []
        for path in args.curves or []:
            p = _params(path)
            if not isinstance(p, EngineCurveParams):
                raise InputError(f"{path}: expected engine_curve parameters")
            curves.append(p)
        dyno = load_csv(_existing(args.dyno), ("engine_rpm", "throttle_pct"), "torque_nm") if args.dyno else None
        if not curves and dyno is None:
            raise InputError("give --curves and/or --dyno (or --fixture)")
    emap = build_engine_map(curves, dyno, vp)
    prov = args.provenance_out or f"{args.out}.provenance.csv"
    with _atomic(args.out) as t1, _atomic(prov) as t2:
        emap.to_csv(t1, t2)
    RunManifest("build-engine-map", sys.argv[1:], None,
                {"curves": args.curves, "dyno": args.dyno, "vehicle": args.vehicle, "fixture": args.fixture},
                {"map": str(args.out), "provenance": str(prov)}, None).write(f"{args.out}.manifest.json")
    return EXIT_OK


def cmd_plan(args) -> int:
    vp = _vehicle(args.vehicle)
    track = make_oval(args.straight, args.radius, args.spacing)
    mus = _mu_list(args.mu)
    with _atomic(args.out) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "kappa", "mu", "a_y_max", "v_des"])
        for mu in mus:
            planner = _planner(args, vp, mu)
            a_max = steady_lateral_limit(planner, vp)
            for s, k in zip(track.s, track.kappa):
                w.writerow([repr(float(s)), repr(float(k)), mu, repr(a_max),
                            repr(plan_velocity(float(k), a_max, planner.v_cap))])
    outputs = {"plan": str(args.out)}
    if args.track_out:
        with _atomic(args.track_out) as tmp:
            track.to_csv(tmp)
        outputs["track"] = str(args.track_out)
    RunManifest("plan", sys.argv[1:], None, {"vehicle": args.vehicle, "wheel_tires": args.wheel_tires},
                outputs, None).write(f"{args.out}.manifest.json")
    return EXIT_OK


def _gain_table(args, vp, geom) -> LqrGainTable:
    front = _tire(args.front_tire, fixtures.FRONT_AXLE_TIRE)
    rear = _tire(args.rear_tire, fixtures.REAR_AXLE_TIRE)
    Q = np.diag(args.q) if args.q else fixtures.LQR_Q
    R = np.array([[args.r]]) if args.r is not None else fixtures.LQR_R
    bp = args.breakpoints or fixtures.LQR_BREAKPOINTS
    # axle fits cover two tires
    return lqr_gain_table(cornering_stiffness(front) / 2, cornering_stiffness(rear) / 2, vp, geom, Q, R, bp)


def cmd_lqr_gains(args) -> int:
    vp, geom = _vehicle(args.vehicle), _geometry(args.geometry)
    table = _gain_table(args, vp, geom)
    _write_json(args.out, table.to_dict())
    RunManifest("lqr-gains", sys.argv[1:], None,
                {"vehicle": args.vehicle, "geometry": args.geometry, "front_tire": args.front_tire,
                 "rear_tire": args.rear_tire}, {"gains": str(args.out)}, None).write(f"{args.out}.manifest.json")
    return EXIT_OK


def cmd_sim(args) -> int:
    vp, geom = _vehicle(args.vehicle), _geometry(args.geometry)
    front = _tire(args.front_tire, fixtures.FRONT_AXLE_TIRE)
    rear = _tire(args.rear_tire, fixtures.REAR_AXLE_TIRE)
    if args.gains:
        try:
            table = LqrGainTable.from_dict(_read_json(args.gains))
        except (KeyError, TypeError, IndexError) as exc:
            raise InputError(f"{args.gains}: bad gain table ({exc})") from exc
    else:
        table = _gain_table(args, vp, geom)
    if args.engine_map:
        emap = EngineTorqueMap.from_csv(_existing(args.engine_map))
    else:
        emap = build_engine_map(fixtures.reference_fitted_curves(), fixtures.dyno_dataset(), vp)
    track = make_oval(args.straight, args.radius, args.spacing)
    (mu,) = _mu_list([args.mu])
    cfg = SimConfig(dt=args.dt, speed_gain=args.speed_gain, corridor=args.corridor)
    t0 = time.perf_counter()
    try:
        trace = run_lap(track, _planner(args, vp, mu), table, emap, vp, geom, front, rear, args.laps, cfg)
        failure = None
    except SimulationError as exc:
        trace, failure = exc.trace, exc
    with _atomic(args.out) as tmp:
        trace.to_csv(tmp)
    summary = lap_summary(trace, track)
    summary["wall_time_s"] = time.perf_counter() - t0
    summary["failure"] = str(failure) if failure else None
    outputs = {"trace": str(args.out)}
    if args.summary:
        _write_json(args.summary, summary)
        outputs["summary"] = str(args.summary)
    RunManifest("sim", sys.argv[1:], None,
                {"gains": args.gains, "engine_map": args.engine_map, "vehicle": args.vehicle}, outputs,
                None).write(f"{args.out}.manifest.json")
    if failure:
        raise failure
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _vehicle_flags(p, tires=True, wheels=False):
    p.add_argument("--vehicle", help="vehicle parameter JSON (default: placeholder fixture)")
    if tires:
        p.add_argument("--geometry", help="JSON with l_f, l_r, I_z")
        p.add_argument("--front-tire", help="front axle tire params JSON")
        p.add_argument("--rear-tire", help="rear axle tire params JSON")
    if wheels:
        p.add_argument("--wheel-tires", nargs=4, metavar=("LF", "RF", "LR", "RR"),
                       help="per-wheel tire params JSON files")
        p.add_argument("--v-cap", type=float, default=60.0, help="speed cap, m/s")


def _oval_flags(p):
    p.add_argument("--straight", type=float, default=400.0, help="straight length, m")
    p.add_argument("--radius", type=float, default=200.0, help="corner radius, m")
    p.add_argument("--spacing", type=float, default=1.0, help="centerline sample spacing, m")


def _lqr_flags(p):
    p.add_argument("--q", type=_floats, help="diagonal of Q (4 values)")
    p.add_argument("--r", type=float, help="steering weight R")
    p.add_argument("--breakpoints", type=_floats, help="velocity breakpoints, m/s")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mihpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="identify model parameters from a dataset CSV")
    p.add_argument("--config", help="optimizer config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=sorted(MODELS), required=True)
    p.add_argument("--throttle", type=float, help="throttle percent of an engine curve")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("generate", help="write a synthetic dataset CSV")
    p.add_argument("--model", choices=sorted(MODELS), required=True)
    p.add_argument("--truth", help="ground-truth params JSON (default: fixture values)")
    p.add_argument("--throttle", type=float, default=15.0)
    p.add_argument("--n-samples", type=_positive_int, default=fixtures.TIRE_SAMPLES)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--input-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="convergence curves of several optimizers at an equal budget")
    p.add_argument("--config", help="optimizer config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=sorted(MODELS), default="tire")
    p.add_argument("--methods", default="mihpo,gbo,pso", help="comma-separated methods or config variants")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seeds", type=_positive_int, default=1)
    p.add_argument("--threshold", type=float, help="loss threshold for evaluations-to-reach")
    p.add_argument("--out", required=True, help="combined curve CSV")
    p.add_argument("--summary", help="summary JSON")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("build-engine-map", help="merge fitted curves and dyno data into a torque map")
    p.add_argument("--curves", nargs="+", help="engine_curve params JSON files")
    p.add_argument("--dyno", help="CSV with engine_rpm,throttle_pct,torque_nm")
    p.add_argument("--fixture", action="store_true", help="use the synthetic placeholder engine")
    p.add_argument("--vehicle")
    p.add_argument("--out", required=True)
    p.add_argument("--provenance-out")
    p.set_defaults(func=cmd_build_engine_map)

    p = sub.add_parser("plan", help="speed plan over an oval for one or more mu values")
    p.add_argument("--mu", type=float, nargs="+", default=[0.7])
    _oval_flags(p)
    _vehicle_flags(p, tires=False, wheels=True)
    p.add_argument("--out", required=True)
    p.add_argument("--track-out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("lqr-gains", help="velocity-scheduled LQR steering gains")
    _vehicle_flags(p)
    _lqr_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lqr_gains)

    p = sub.add_parser("sim", help="closed-loop laps of an oval")
    p.add_argument("--mu", type=float, default=0.7)
    p.add_argument("--laps", type=int, default=1)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--speed-gain", type=float, default=SimConfig.speed_gain)
    p.add_argument("--corridor", type=float, default=SimConfig.corridor)
    p.add_argument("--gains", help="gain table JSON (default: designed from the tire files)")
    p.add_argument("--engine-map", help="engine map CSV (default: placeholder engine)")
    _oval_flags(p)
    _vehicle_flags(p, wheels=True)
    _lqr_flags(p)
    p.add_argument("--out", required=True, help="trace CSV")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_sim)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc),
                                           "exit_code": code}}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SimulationError, ControlDesignError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DataError, ConfigError, InputError, OSError, ValueError) as exc:
        return _fail(exc, EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())

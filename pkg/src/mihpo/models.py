"""Parametric vehicle models and the data preparation that feeds their fits.

* Lateral tire force: Pacejka magic formula with horizontal and vertical offsets.
* Engine torque curve: cubic in normalized engine speed, one curve per throttle.
* Brake: single-gain affine placeholder.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .objective import DataError, Dataset, MSEObjective
from .optimizer import MutationPolicy, OptimizationReport, ParamSpace, run_mihpo

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParametricModel:
    """A named model family ``f(x; p)`` evaluated on whole input arrays."""

    name: str
    param_names: tuple[str, ...]
    predict: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    input_names: tuple[str, ...] = ("x",)
    output_name: str = "y"


# --------------------------------------------------------------------------
# Tire


@dataclass(frozen=True)
class TireParams:
    B: float
    C: float
    D: float
    S_x: float = 0.0
    S_y: float = 0.0

    def __post_init__(self):
        if not (self.B > 0 and self.C > 0 and self.D > 0):
            raise ValueError(f"B, C, D must be positive: {self}")
        if not (np.isfinite(self.S_x) and np.isfinite(self.S_y)):
            raise ValueError(f"shifts must be finite: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.B, self.C, self.D, self.S_x, self.S_y])

    @classmethod
    def from_array(cls, values) -> "TireParams":
        return cls(*(float(v) for v in values))

    def scaled(self, factor: float) -> "TireParams":
        """Same curve shape with forces scaled by ``factor``."""
        return TireParams(self.B, self.C, self.D * factor, self.S_x, self.S_y * factor)


def _tire_predict(alpha, v):
    return v[2] * np.sin(v[1] * np.arctan(v[0] * (alpha + v[3]))) + v[4]


def tire_lateral_force(alpha, p: TireParams):
    """Lateral force in N at slip angle ``alpha`` (rad); scalar or array."""
    return _tire_predict(np.asarray(alpha, dtype=float), (p.B, p.C, p.D, p.S_x, p.S_y))


TIRE_MODEL = ParametricModel("tire", ("B", "C", "D", "S_x", "S_y"), _tire_predict,
                             ("alpha_rad",), "fy_n")


def default_tire_space(data: Dataset | None = None, peak: float | None = None) -> ParamSpace:
    """A broad prior for the tire fit, scaled by the largest observed force when data is given."""
    if peak is None:
        peak = float(np.max(np.abs(data.outputs))) if data is not None else 5000.0
    return ParamSpace.from_dicts([
        {"name": "B", "mean": 10.0, "std": 4.0, "min": 1.0, "max": 30.0},
        {"name": "C", "mean": 1.5, "std": 0.4, "min": 0.5, "max": 2.5},
        {"name": "D", "mean": peak, "std": 0.3 * peak, "min": 0.1 * peak, "max": 3.0 * peak},
        {"name": "S_x", "mean": 0.0, "std": 0.01, "min": -0.05, "max": 0.05},
        {"name": "S_y", "mean": 0.0, "std": 0.05 * peak, "min": -0.3 * peak, "max": 0.3 * peak},
    ])


@dataclass
class FitOptions:
    R: int = 10000
    eta: int = 5
    seed: int = 0
    sigma_max_frac: float = 0.1
    sigma_min_frac: float = 0.001
    jobs: int = 1


def _fit(model: ParametricModel, data: Dataset, space: ParamSpace, opts: FitOptions) -> OptimizationReport:
    if len(space) != len(model.param_names):
        raise ValueError(f"{model.name} needs {len(model.param_names)} parameters, space has {len(space)}")
    policy = MutationPolicy.from_space(space, opts.sigma_max_frac, opts.sigma_min_frac, opts.seed)
    return run_mihpo(space, MSEObjective(model, data), opts.R, opts.eta, policy, opts.seed, opts.jobs)


def fit_tire(data: Dataset, space: ParamSpace | None = None,
             opts: FitOptions | None = None) -> tuple[TireParams, OptimizationReport]:
    if data.inputs.shape[1] != 1:
        raise DataError("tire datasets have a single slip-angle input column")
    report = _fit(TIRE_MODEL, data, space or default_tire_space(data), opts or FitOptions())
    return TireParams.from_array(report.best_config.values), report


# --------------------------------------------------------------------------
# Engine


@dataclass(frozen=True)
class EngineCurveParams:
    p0: float
    p1: float
    p2: float
    p3: float
    throttle: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("engine curve coefficients must be finite")
        if not 0 < self.throttle <= 100:
            raise ValueError(f"throttle must be in (0, 100], got {self.throttle}")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.p0, self.p1, self.p2, self.p3])


def _cubic(w, v):
    return v[0] + w * (v[1] + w * (v[2] + w * v[3]))


def engine_torque(w_e_norm, p: EngineCurveParams):
    """Torque in N*m at normalized engine speed ``w_e_norm`` in [0, 1]."""
    w = np.asarray(w_e_norm, dtype=float)
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise ValueError("normalized engine speed must lie in [0, 1]")
    return _cubic(w, p.coefficients)


ENGINE_CURVE_MODEL = ParametricModel("engine_curve", ("p0", "p1", "p2", "p3"), _cubic,
                                     ("engine_speed_norm",), "torque_nm")


def default_engine_space(data: Dataset) -> ParamSpace:
    scale = float(np.max(np.abs(data.outputs))) or 1.0
    return ParamSpace.from_dicts([
        {"name": f"p{i}", "mean": float(np.mean(data.outputs)) if i == 0 else 0.0,
         "std": scale, "min": -4 * scale, "max": 4 * scale}
        for i in range(4)
    ])


def least_squares_cubic(data: Dataset) -> tuple[np.ndarray, float]:
    """Closed-form least-squares cubic; the reference the engine fit is judged against."""
    w = data.x
    V = np.vander(w, 4, increasing=True)
    coef, *_ = np.linalg.lstsq(V, data.outputs, rcond=None)
    resid = data.outputs - V @ coef
    return coef, float(np.mean(resid**2))


def fit_engine_curve(data: Dataset, throttle: float, space: ParamSpace | None = None,
                     opts: FitOptions | None = None) -> tuple[EngineCurveParams, OptimizationReport]:
    """Fit one throttle's torque curve and compare it with the least-squares cubic.

    A fit worse than 1.05x the least-squares loss is logged as a warning.
    """
    w = data.x
    if data.inputs.shape[1] != 1 or np.any(w < 0) or np.any(w > 1):
        raise DataError("engine datasets need one normalized engine-speed column in [0, 1]")
    opts = opts or FitOptions(R=5000, sigma_min_frac=1e-4)
    report = _fit(ENGINE_CURVE_MODEL, data, space or default_engine_space(data), opts)
    _, ls_loss = least_squares_cubic(data)
    if report.best_loss > 1.05 * ls_loss:
        log.warning("engine fit at %s%% throttle: loss %.6g exceeds 1.05x least squares (%.6g)",
                    throttle, report.best_loss, ls_loss)
    return EngineCurveParams(*report.best_config.values, throttle=throttle), report


# --------------------------------------------------------------------------
# Vehicle and drive logs

WHEELS = ("LF", "RF", "LR", "RR")


@dataclass(frozen=True)
class VehicleParams:
    m: float                    # kg
    m_s: float                  # sprung mass, kg
    C_d: float                  # N*s^2/m^2
    C_r: float                  # N
    h_a: float                  # roll height, m
    R_w: float                  # wheel radius, m
    eta_t: float                # transmission efficiency
    i_0: float                  # final drive ratio
    gear_ratios: tuple[float, ...]
    w_e_max: float              # rpm
    track_width: float          # m
    nominal_loads: tuple[float, float, float, float]  # N, ordered as WHEELS
    brake_gain: float = 100.0   # N of braking force per pedal percent

    def __post_init__(self):
        scalars = (self.m, self.m_s, self.C_d, self.C_r, self.h_a, self.R_w, self.i_0,
                   self.w_e_max, self.track_width, self.brake_gain)
        if min(scalars) <= 0 or min(self.gear_ratios) <= 0 or min(self.nominal_loads) <= 0:
            raise ValueError("vehicle parameters must all be positive")
        if not 0 < self.eta_t <= 1:
            raise ValueError("transmission efficiency must be in (0, 1]")
        if len(self.nominal_loads) != 4:
            raise ValueError("need one nominal load per wheel")

    def gear_ratio(self, gear: int) -> float:
        """Ratio for 1-based ``gear``."""
        if not 1 <= gear <= len(self.gear_ratios):
            raise ValueError(f"unknown gear {gear}; vehicle has {len(self.gear_ratios)}")
        return self.gear_ratios[gear - 1]

    def drivetrain_gain(self, gear: int) -> float:
        """Traction force per unit engine torque, 1/m."""
        return self.eta_t * self.gear_ratio(gear) * self.i_0 / self.R_w

    def engine_rpm(self, v_x: float, gear: int) -> float:
        return v_x / self.R_w * self.gear_ratio(gear) * self.i_0 * 60.0 / (2 * np.pi)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        d = dict(d)
        d["gear_ratios"] = tuple(d["gear_ratios"])
        d["nominal_loads"] = tuple(d["nominal_loads"])
        return cls(**d)


@dataclass(frozen=True)
class DriveLogSample:
    v_x: float
    a_x: float
    w_e: float       # rpm
    gear: int
    throttle: float  # percent


def traction_force(T_e: float, gear: int, vp: VehicleParams) -> float:
    return T_e * vp.drivetrain_gain(gear)


def longitudinal_accel(F_x: float, v_x: float, vp: VehicleParams) -> float:
    return (F_x - vp.C_d * v_x**2 - vp.C_r) / vp.m


def engine_torque_from_log(sample: DriveLogSample, vp: VehicleParams) -> float:
    """Invert the longitudinal balance: engine torque that produced the logged acceleration."""
    F = vp.m * sample.a_x + vp.C_d * sample.v_x**2 + vp.C_r
    return F / vp.drivetrain_gain(sample.gear)


def derive_engine_samples(log_samples: Sequence[DriveLogSample], vp: VehicleParams,
                          throttle_labels: Sequence[float] = (5, 15, 20),
                          tolerance: float = 2.0) -> dict[float, Dataset]:
    """Group drive-log samples into per-throttle ``(w_e / w_e_max, T_e)`` datasets.

    Each sample goes to the nearest label within ``tolerance`` percent; the rest are dropped.
    """
    if not log_samples:
        raise DataError("drive log is empty")
    labels = np.asarray(throttle_labels, dtype=float)
    buckets: dict[float, list] = {float(l): [] for l in labels}
    for smp in log_samples:
        torque = engine_torque_from_log(smp, vp)
        nearest = labels[np.argmin(np.abs(labels - smp.throttle))]
        if abs(nearest - smp.throttle) <= tolerance:
            buckets[float(nearest)].append((smp.w_e / vp.w_e_max, torque))
    out = {}
    for label, rows in buckets.items():
        if rows:
            arr = np.array(rows)
            out[label] = Dataset(arr[:, :1], arr[:, 1], f"engine_{label:g}pct",
                                 ("engine_speed_norm",), "torque_nm")
    return out


def load_drive_log(path) -> list[DriveLogSample]:
    """Read ``v_x,a_x,engine_rpm,gear,throttle_pct`` rows."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"v_x", "a_x", "engine_rpm", "gear", "throttle_pct"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: drive log needs columns {sorted(need)}")
        return [DriveLogSample(float(r["v_x"]), float(r["a_x"]), float(r["engine_rpm"]),
                               int(r["gear"]), float(r["throttle_pct"])) for r in reader]


# --------------------------------------------------------------------------
# Brake


def brake_force_to_pedal(F_brake: float, k_b: float) -> float:
    """Pedal percentage for a braking force under the single-gain placeholder model."""
    if F_brake < 0:
        raise ValueError("braking force must be non-negative")
    return float(np.clip(F_brake / k_b, 0.0, 100.0))


BRAKE_MODEL = ParametricModel("brake", ("k_b",), lambda pedal, v: v[0] * pedal,
                              ("brake_pct",), "brake_force_n")


# --------------------------------------------------------------------------
# Serialization


def params_to_json(path, model: str, params, loss: float | None) -> None:
    if isinstance(params, TireParams):
        payload = asdict(params)
    elif isinstance(params, EngineCurveParams):
        payload = asdict(params)
    else:
        payload = dict(params)
    with open(path, "w") as fh:
        json.dump({"model": model, "params": payload, "loss": loss}, fh, indent=2)


def params_from_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc["model"] == "tire":
        return TireParams(**doc["params"])
    if doc["model"] == "engine_curve":
        return EngineCurveParams(**doc["params"])
    if doc["model"] == "brake":
        return {"k_b": float(doc["params"]["k_b"])}
    raise DataError(f"unknown model {doc['model']!r}")

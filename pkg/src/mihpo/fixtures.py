"""Placeholder vehicle, tire and engine constants.

None of these numbers describe a real car.  They are self-consistent
stand-ins so that fitting, planning, control and simulation can be
exercised end to end; swap in measured values for real use.
"""
from __future__ import annotations

import numpy as np

from .models import EngineCurveParams, TireParams, VehicleParams, least_squares_cubic
from .objective import Dataset
from .planning import ChassisGeometry, PlannerParams, tire_peak_force

# Ground truth for the synthetic tire-recovery benchmark.
TIRE_TRUTH = TireParams(B=9.5, C=1.4, D=5200.0, S_x=0.008, S_y=-150.0)
TIRE_NOISE_STD = 200.0
TIRE_ALPHA_RANGE = (-0.12, 0.12)
TIRE_SAMPLES = 3000

GEOMETRY = ChassisGeometry(l_f=1.6, l_r=1.4, I_z=1000.0)

_G = 9.81
_M = 750.0
_FRONT_AXLE_LOAD = _M * _G * GEOMETRY.l_r / GEOMETRY.wheelbase
_REAR_AXLE_LOAD = _M * _G * GEOMETRY.l_f / GEOMETRY.wheelbase

VEHICLE = VehicleParams(
    m=_M,
    m_s=680.0,
    C_d=0.8,
    C_r=150.0,
    h_a=0.25,
    R_w=0.3,
    eta_t=0.9,
    i_0=3.0,
    gear_ratios=(2.9, 2.1, 1.6, 1.3, 1.1, 0.95),
    w_e_max=7500.0,
    track_width=1.6,
    nominal_loads=(_FRONT_AXLE_LOAD / 2, _FRONT_AXLE_LOAD / 2, _REAR_AXLE_LOAD / 2, _REAR_AXLE_LOAD / 2),
    brake_gain=100.0,
)

# Per-wheel tires (LF, RF, LR, RR); the outside (right) tires carry more grip.
WHEEL_TIRES = (
    TireParams(B=10.0, C=1.4, D=2100.0),
    TireParams(B=10.0, C=1.4, D=2500.0),
    TireParams(B=11.0, C=1.4, D=2400.0),
    TireParams(B=11.0, C=1.4, D=2800.0),
)
# Axle tires are the left + right sums (same B, C so the sum is exact).
FRONT_AXLE_TIRE = TireParams(B=10.0, C=1.4, D=WHEEL_TIRES[0].D + WHEEL_TIRES[1].D)
REAR_AXLE_TIRE = TireParams(B=11.0, C=1.4, D=WHEEL_TIRES[2].D + WHEEL_TIRES[3].D)

LQR_Q = np.diag([30.0, 1.0, 10.0, 1.0])
LQR_R = np.array([[100.0]])
LQR_BREAKPOINTS = tuple(float(v) for v in range(10, 65, 5))
MAX_STEER = 0.35


def planner_params(mu: float = 0.7, v_cap: float = 60.0) -> PlannerParams:
    peaks = tuple(tire_peak_force(t) for t in WHEEL_TIRES)
    return PlannerParams(mu=mu, peak_forces=peaks, nominal_loads=VEHICLE.nominal_loads, v_cap=v_cap)


# Synthetic engine: full-load cubic scaled by a throttle response, minus friction.
_FULL_LOAD = np.array([180.0, 820.0, -640.0, 110.0])   # N*m over normalized speed
_FRICTION = np.array([25.0, 45.0, 0.0, 0.0])


def throttle_response(throttle_pct):
    return (1 - np.exp(-np.asarray(throttle_pct, dtype=float) / 22.0)) / (1 - np.exp(-100 / 22.0))


def true_engine_torque(w_e_norm, throttle_pct):
    w = np.asarray(w_e_norm, dtype=float)
    full = np.polynomial.polynomial.polyval(w, _FULL_LOAD)
    fric = np.polynomial.polynomial.polyval(w, _FRICTION)
    return throttle_response(throttle_pct) * full - fric


def true_engine_curve(throttle_pct: float) -> EngineCurveParams:
    coef = throttle_response(throttle_pct) * _FULL_LOAD - _FRICTION
    return EngineCurveParams(*coef, throttle=throttle_pct)


DYNO_THROTTLES = (0.0, 10.0, 30.0, 40.0, 60.0, 80.0, 100.0)
DYNO_SPEEDS = tuple(float(v) for v in range(1000, 7501, 500))


def dyno_dataset() -> Dataset:
    rows = [(w, t, float(true_engine_torque(w / VEHICLE.w_e_max, t)))
            for t in DYNO_THROTTLES for w in DYNO_SPEEDS]
    arr = np.array(rows)
    return Dataset(arr[:, :2], arr[:, 2], "dyno", ("engine_rpm", "throttle_pct"), "torque_nm")


def reference_fitted_curves(throttles=(5.0, 15.0, 20.0)) -> list[EngineCurveParams]:
    """Cubic curves as a perfect identification would return them (least squares on clean samples)."""
    w = np.linspace(0.1, 1.0, 50)
    out = []
    for t in throttles:
        coef, _ = least_squares_cubic(Dataset(w, true_engine_torque(w, t)))
        out.append(EngineCurveParams(*coef, throttle=t))
    return out

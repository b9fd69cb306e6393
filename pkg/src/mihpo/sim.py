"""Closed-loop dynamic bicycle simulation on an oval track.

Fixed-step RK4.  The loop is: tire-load-aware speed limit -> proportional
speed law -> engine-map throttle or brake pedal; LQR steering on the
path error state.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .models import TireParams, VehicleParams, brake_force_to_pedal
from .planning import (ChassisGeometry, EngineTorqueMap, LqrGainTable, PlannerParams, axle_force_limits,
                       inverse_throttle, max_lateral_accel, plan_velocity, steering_command)


class SimulationError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class TrackPath:
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    kappa: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "x", "y", "heading", "kappa"])
            for row in zip(self.s, self.x, self.y, self.heading, self.kappa):
                w.writerow([repr(float(v)) for v in row])

    def kappa_at(self, s: float) -> float:
        return float(self.kappa[self.index_at(s)])

    def index_at(self, s: float) -> int:
        s = s % self.length
        return min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.s) - 2)

    def project(self, px: float, py: float, hint: int, window: int = 30):
        """Nearest centerline point searched around sample ``hint``.

        Returns ``(index, s, e_y, heading, kappa)`` with ``e_y`` positive to
        the left of the path.
        """
        n = len(self.s) - 1  # last sample duplicates the first
        idx = (hint + np.arange(-window, window + 1)) % n
        d2 = (self.x[idx] - px) ** 2 + (self.y[idx] - py) ** 2
        i = int(idx[int(np.argmin(d2))])
        h = self.heading[i]
        dx, dy = px - self.x[i], py - self.y[i]
        along = dx * math.cos(h) + dy * math.sin(h)
        j = i if along >= 0 else (i - 1) % n
        h = self.heading[j]
        dx, dy = px - self.x[j], py - self.y[j]
        along = dx * math.cos(h) + dy * math.sin(h)
        seg = self.s[j + 1] - self.s[j]
        along = min(max(along, 0.0), seg)
        k = self.kappa[j]
        # heading along the segment advances with curvature
        heading = h + k * along
        if k != 0:
            # exact offset from a circular arc
            cx, cy = self.x[j] - math.sin(h) / k, self.y[j] + math.cos(h) / k
            r = math.hypot(px - cx, py - cy)
            e_y = (1 / k - r) if k > 0 else (r - 1 / abs(k))
            heading = math.atan2(py - cy, px - cx) + math.copysign(math.pi / 2, k)
            along = min(max(_wrap(heading - h) / k, 0.0), seg)
        else:
            e_y = -dx * math.sin(h) + dy * math.cos(h)
        return j, float(self.s[j] + along), float(e_y), float(heading), float(k)


def make_oval(straight_length: float, corner_radius: float, sample_spacing: float = 1.0) -> TrackPath:
    """Counter-clockwise oval: two straights joined by two semicircles.

    Starts at the beginning of the lower straight heading +x.  The last
    sample repeats the first pose (heading advanced by 2*pi).
    """
    if min(straight_length, corner_radius, sample_spacing) <= 0:
        raise ValueError("oval dimensions must be positive")
    L, R = float(straight_length), float(corner_radius)
    arc = math.pi * R
    total = 2 * L + 2 * arc
    n = max(4, math.ceil(total / sample_spacing))
    s = np.linspace(0.0, total, n + 1)
    x, y, hd, k = (np.empty(n + 1) for _ in range(4))
    for i, si in enumerate(s):
        if si < L:
            x[i], y[i], hd[i], k[i] = si, -R, 0.0, 0.0
        elif si < L + arc:
            th = (si - L) / R
            x[i], y[i], hd[i], k[i] = L + R * math.sin(th), -R * math.cos(th), th, 1 / R
        elif si < 2 * L + arc:
            d = si - L - arc
            x[i], y[i], hd[i], k[i] = L - d, R, math.pi, 0.0
        else:
            th = (si - 2 * L - arc) / R
            x[i], y[i], hd[i], k[i] = -R * math.sin(th), R * math.cos(th), math.pi + th, 1 / R
    x[-1], y[-1], hd[-1], k[-1] = 0.0, -R, 2 * math.pi, 0.0
    return TrackPath(s, x, y, hd, k)


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    psi_dot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v_x, self.v_y, self.psi_dot])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(*(float(v) for v in a))


def _fy(alpha: float, p: TireParams) -> float:
    return p.D * math.sin(p.C * math.atan(p.B * (alpha + p.S_x))) + p.S_y


KINEMATIC_SPEED = 1.0


def derivatives(state: np.ndarray, delta: float, F_x: float, front: TireParams, rear: TireParams,
                vp: VehicleParams, geom: ChassisGeometry) -> tuple[np.ndarray, float]:
    """State derivative and lateral acceleration ``v_y' + v_x * psi'``.

    Rear-wheel drive: ``F_x`` acts along the body axis.  Below
    ``KINEMATIC_SPEED`` the lateral states follow kinematic steering.
    """
    X, Y, psi, vx, vy, r = state
    l_f, l_r = geom.l_f, geom.l_r
    resist = vp.C_d * vx * vx + vp.C_r * min(1.0, max(vx, 0.0) / 0.5)
    if vx < KINEMATIC_SPEED:
        r = vx * math.tan(delta) / geom.wheelbase
        vy = l_r * r
        dvx = (F_x - resist) / vp.m
        return np.array([vx * math.cos(psi) - vy * math.sin(psi), vx * math.sin(psi) + vy * math.cos(psi),
                         r, dvx, 0.0, 0.0]), vx * r
    alpha_f = delta - math.atan2(vy + l_f * r, vx)
    alpha_r = -math.atan2(vy - l_r * r, vx)
    fyf = _fy(alpha_f, front)
    fyr = _fy(alpha_r, rear)
    cd, sd = math.cos(delta), math.sin(delta)
    a_y = (fyr + fyf * cd) / vp.m
    dvx = (F_x - fyf * sd - resist) / vp.m + vy * r
    dvy = a_y - vx * r
    dr = (l_f * fyf * cd - l_r * fyr) / geom.I_z
    return np.array([vx * math.cos(psi) - vy * math.sin(psi), vx * math.sin(psi) + vy * math.cos(psi),
                     r, dvx, dvy, dr]), a_y


def step(state: VehicleState, delta: float, F_x: float, dt: float, front: TireParams, rear: TireParams,
         vp: VehicleParams, geom: ChassisGeometry) -> VehicleState:
    """Advance one RK4 step of length ``dt`` (at most 0.02 s)."""
    if not 0 < dt <= 0.02:
        raise ValueError(f"dt must be in (0, 0.02], got {dt}")
    x0 = state.as_array()
    f = lambda z: derivatives(z, delta, F_x, front, rear, vp, geom)[0]
    k1 = f(x0)
    k2 = f(x0 + 0.5 * dt * k1)
    k3 = f(x0 + 0.5 * dt * k2)
    k4 = f(x0 + dt * k3)
    x1 = x0 + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x1)):
        raise SimulationError(f"non-finite state after step: {x1}")
    x1[3] = max(x1[3], 0.0)
    if x1[3] < KINEMATIC_SPEED:
        x1[5] = x1[3] * math.tan(delta) / geom.wheelbase
        x1[4] = geom.l_r * x1[5]
    return VehicleState.from_array(x1)


TRACE_COLUMNS = ("t", "x", "y", "psi", "v_x", "v_y", "psi_dot", "delta", "throttle", "brake",
                 "v_des", "a_y", "a_y_max", "e_y", "e_psi", "kappa", "s")


@dataclass
class SimTrace:
    dt: float
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    @property
    def duration(self) -> float:
        return len(self.rows) * self.dt

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])


@dataclass
class SimConfig:
    dt: float = 0.01
    speed_gain: float = 1500.0      # N per m/s of speed error
    max_steer: float = 0.35
    corridor: float = 5.0           # m; leaving it aborts the run
    initial_speed: float = 30.0
    shift_rpm_frac: float = 0.95
    min_rpm: float | None = None


def select_gear(v_x: float, vp: VehicleParams, frac: float = 0.95) -> int:
    """Lowest gear keeping engine speed under ``frac * w_e_max``."""
    for g in range(1, len(vp.gear_ratios) + 1):
        if vp.engine_rpm(v_x, g) <= frac * vp.w_e_max:
            return g
    return len(vp.gear_ratios)


def _speed_target(track: TrackPath, s: float, a_y_max: float, planner: PlannerParams) -> float:
    """Planned speed at ``s``, lowered so later curvature limits are reachable at ``decel_limit``."""
    horizon = planner.v_cap**2 / (2 * planner.decel_limit)
    n = len(track.s) - 1
    i0 = track.index_at(s)
    spacing = track.length / n
    m = int(math.ceil(horizon / spacing)) + 1
    idx = (i0 + np.arange(m)) % n
    kap = np.abs(track.kappa[idx])
    dist = np.maximum(np.arange(m) * spacing - (s % track.length - track.s[i0]), 0.0)
    with np.errstate(divide="ignore"):
        v_lim = np.where(kap > 0, np.sqrt(a_y_max / np.where(kap > 0, kap, 1.0)), planner.v_cap)
    v_lim = np.minimum(v_lim, planner.v_cap)
    reach = np.sqrt(v_lim**2 + 2 * planner.decel_limit * dist)
    return float(min(plan_velocity(track.kappa[i0], a_y_max, planner.v_cap), reach.min()))


def run_lap(track: TrackPath, planner: PlannerParams, table: LqrGainTable, engine_map: EngineTorqueMap,
            vp: VehicleParams, geom: ChassisGeometry, front: TireParams, rear: TireParams,
            n_laps: int = 1, config: SimConfig | None = None) -> SimTrace:
    """Drive ``n_laps`` laps from the start line and record a trace.

    The lateral limit uses the measured lateral acceleration for load
    transfer and evaluates the yaw coupling term at zero, so it bounds the
    total lateral acceleration ``v_x * psi'`` reached in steady cornering.
    """
    cfg = config or SimConfig()
    trace = SimTrace(cfg.dt)
    if n_laps <= 0:
        return trace
    state = VehicleState(track.x[0], track.y[0], track.heading[0], cfg.initial_speed, 0.0, 0.0)
    min_rpm = cfg.min_rpm if cfg.min_rpm is not None else engine_map.speed_grid[0]
    max_rpm = engine_map.speed_grid[-1]
    goal = n_laps * track.length
    travelled, last_s, hint = 0.0, 0.0, 0
    delta, a_y, t = 0.0, 0.0, 0.0
    max_steps = int(1e7)

    for _ in range(max_steps):
        hint, s, e_y, ref_heading, kappa = track.project(state.x, state.y, hint)
        ds = s - last_s
        if ds < -0.5 * track.length:
            ds += track.length
        travelled += ds
        last_s = s
        if travelled >= goal:
            break

        e_psi = _wrap(state.psi - ref_heading)
        s_dot = (state.v_x * math.cos(e_psi) - state.v_y * math.sin(e_psi)) / (1 - kappa * e_y)
        xi = np.array([e_y, state.v_y * math.cos(e_psi) + state.v_x * math.sin(e_psi),
                       e_psi, state.psi_dot - kappa * s_dot])

        F_f, F_r = axle_force_limits(planner, vp, a_y)
        a_y_max = max(max_lateral_accel(F_f, F_r, delta, state.v_x, 0.0, vp.m), 0.0)
        v_des = _speed_target(track, s, a_y_max, planner)

        F_cmd = cfg.speed_gain * (v_des - state.v_x)
        gear = select_gear(state.v_x, vp, cfg.shift_rpm_frac)
        rpm = min(max(vp.engine_rpm(state.v_x, gear), min_rpm), max_rpm)
        gain = vp.drivetrain_gain(gear)
        if F_cmd >= 0:
            throttle = inverse_throttle(engine_map, rpm, F_cmd / gain)
            brake = 0.0
            F_x = engine_map.torque_at(rpm, throttle) * gain
        else:
            throttle = 0.0
            brake = brake_force_to_pedal(-F_cmd, vp.brake_gain)
            F_x = engine_map.torque_at(rpm, 0.0) * gain - brake * vp.brake_gain

        delta = steering_command(xi, state.v_x, table, cfg.max_steer)
        trace.rows.append((t, state.x, state.y, state.psi, state.v_x, state.v_y, state.psi_dot, delta,
                           throttle, brake, v_des, a_y, a_y_max, e_y, e_psi, kappa, travelled))
        if abs(e_y) > cfg.corridor:
            raise SimulationError(f"left the {cfg.corridor} m corridor at t={t:.2f}s (e_y={e_y:.2f} m)", trace)

        state = step(state, delta, F_x, cfg.dt, front, rear, vp, geom)
        _, a_y = derivatives(state.as_array(), delta, F_x, front, rear, vp, geom)
        t += cfg.dt
    return trace


def steady_corner_mask(trace: SimTrace, track: TrackPath, fraction: float = 0.5) -> np.ndarray:
    """Samples in the middle ``fraction`` of every constant-curvature corner."""
    s = trace.column("s") % track.length
    kap = np.array([track.kappa_at(v) for v in s])
    # corner arcs from the sampled curvature
    curved = track.kappa[:-1] != 0
    edges = np.flatnonzero(np.diff(np.concatenate([[0], curved.astype(int), [0]])))
    mask = np.zeros(len(s), dtype=bool)
    for a, b in zip(edges[::2], edges[1::2]):
        s0, s1 = track.s[a], track.s[b]
        pad = (1 - fraction) / 2 * (s1 - s0)
        mask |= (s >= s0 + pad) & (s <= s1 - pad) & (kap != 0)
    return mask


def lap_summary(trace: SimTrace, track: TrackPath) -> dict:
    """Headline numbers of a run: tracking error, corner speed and lateral-limit use."""
    if len(trace) == 0:
        return {"samples": 0}
    mask = steady_corner_mask(trace, track)
    e_y = trace.column("e_y")
    out = {
        "samples": len(trace),
        "duration_s": trace.duration,
        "max_abs_e_y": float(np.max(np.abs(e_y))),
        "max_abs_e_psi": float(np.max(np.abs(trace.column("e_psi")))),
        "max_v_x": float(np.max(trace.column("v_x"))),
    }
    if mask.any():
        a_y = np.abs(trace.column("a_y")[mask])
        out["corner_speed"] = float(np.mean(trace.column("v_x")[mask]))
        out["corner_a_y_ratio_max"] = float(np.max(a_y / trace.column("a_y_max")[mask]))
    return out

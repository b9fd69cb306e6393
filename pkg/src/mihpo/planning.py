"""Planning and control computations that consume identified model parameters.

Covers tire-load-aware velocity limits, the integrated engine torque map and
its inverse throttle search, cornering stiffness extraction and
velocity-scheduled LQR gains for the lateral error-state model.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.signal

from .models import WHEELS, EngineCurveParams, TireParams, VehicleParams, engine_torque, tire_lateral_force
from .objective import Dataset


class ControlDesignError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Velocity planning


@dataclass(frozen=True)
class PlannerParams:
    """Tire performance factor plus per-wheel peak forces and nominal loads (ordered as WHEELS)."""

    mu: float
    peak_forces: tuple[float, float, float, float]
    nominal_loads: tuple[float, float, float, float]
    v_cap: float
    decel_limit: float = 5.0   # m/s^2, used by the look-ahead speed profile

    def __post_init__(self):
        if not 0 < self.mu <= 1:
            raise ValueError(f"mu must be in (0, 1], got {self.mu}")
        if min(self.peak_forces) <= 0 or min(self.nominal_loads) <= 0:
            raise ValueError("peak forces and nominal loads must be positive")
        if self.v_cap <= 0 or self.decel_limit <= 0:
            raise ValueError("v_cap and decel_limit must be positive")

    def with_mu(self, mu: float) -> "PlannerParams":
        return PlannerParams(mu, self.peak_forces, self.nominal_loads, self.v_cap, self.decel_limit)


def lateral_load_transfer(v_y_dot: float, vp: VehicleParams) -> float:
    """Vertical load moved to the outer wheels: roll couple over track width, in N."""
    return vp.m_s * v_y_dot * vp.h_a / vp.track_width


def wheel_loads(a_y: float, vp: VehicleParams) -> np.ndarray:
    """Per-wheel vertical loads under lateral acceleration ``a_y`` (positive to the left).

    The transfer is shared between the axles in proportion to their static
    loads; positive ``a_y`` loads the right-hand wheels.
    """
    nominal = np.array(vp.nominal_loads, dtype=float)
    dw = lateral_load_transfer(a_y, vp)
    front_share = (nominal[0] + nominal[1]) / nominal.sum()
    shift = np.array([-front_share, front_share, -(1 - front_share), 1 - front_share]) * dw
    return np.maximum(nominal + shift, 0.0)


def max_lateral_tire_force(mu: float, F_z, F_z_nominal, F_peak):
    """Load-scaled tire force limit ``mu * F_z / F_z_nominal * F_peak``."""
    return mu * np.asarray(F_z) / np.asarray(F_z_nominal) * np.asarray(F_peak)


def tire_peak_force(p: TireParams, alpha_range: tuple[float, float] = (-0.5, 0.5), n_grid: int = 2001) -> float:
    """Largest ``|F_y|`` over ``alpha_range``: dense grid, then bounded refinement."""
    lo, hi = alpha_range
    if not lo < hi:
        raise ValueError("alpha_range must be a non-empty interval")
    grid = np.linspace(lo, hi, n_grid)
    mag = np.abs(tire_lateral_force(grid, p))
    i = int(np.argmax(mag))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = scipy.optimize.minimize_scalar(lambda al: -abs(float(tire_lateral_force(al, p))),
                                         bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    return float(max(mag[i], -res.fun))


def axle_force_limits(planner: PlannerParams, vp: VehicleParams, a_y: float) -> tuple[float, float]:
    """Front and rear maximum lateral forces under the current lateral acceleration."""
    loads = wheel_loads(a_y, vp)
    per_wheel = max_lateral_tire_force(planner.mu, loads, planner.nominal_loads, planner.peak_forces)
    return float(per_wheel[0] + per_wheel[1]), float(per_wheel[2] + per_wheel[3])


def max_lateral_accel(F_max_f: float, F_max_r: float, delta: float, v_x: float, psi_dot: float, m: float) -> float:
    if m <= 0:
        raise ValueError("mass must be positive")
    return (F_max_r + F_max_f * math.cos(delta) - m * v_x * psi_dot) / m


def plan_velocity(kappa: float, a_y_max: float, v_cap: float) -> float:
    """Curvature-limited speed ``sqrt(a_y_max / |kappa|)``, capped at ``v_cap``."""
    if a_y_max < 0:
        raise ValueError(f"negative lateral acceleration limit {a_y_max}")
    if kappa == 0:
        return v_cap
    return min(math.sqrt(a_y_max / abs(kappa)), v_cap)


def steady_lateral_limit(planner: PlannerParams, vp: VehicleParams, n_iter: int = 100, tol: float = 1e-12) -> float:
    """Lateral acceleration limit consistent with its own load transfer (zero steer and yaw terms).

    Fixed point of ``a = a_y_max(a)``, approached from the unloaded value.
    """
    a = 0.0
    for _ in range(n_iter):
        F_f, F_r = axle_force_limits(planner, vp, a)
        nxt = max(max_lateral_accel(F_f, F_r, 0.0, 0.0, 0.0, vp.m), 0.0)
        if abs(nxt - a) <= tol * max(1.0, abs(nxt)):
            return nxt
        a = nxt
    return a


# --------------------------------------------------------------------------
# Engine map

PROVENANCE_CODES = {"fitted": "F", "dyno": "D", "interpolated": "I"}


def _isotonic(y: np.ndarray) -> np.ndarray:
    """Least-squares non-decreasing fit (pool adjacent violators)."""
    blocks: list[list[float]] = []  # [mean, weight]
    for v in y:
        blocks.append([float(v), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2 = blocks.pop()
            m1, w1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])
    return np.concatenate([np.full(int(w), m) for m, w in blocks])


@dataclass
class EngineTorqueMap:
    """Torque table indexed ``[speed, throttle]`` with a matching provenance code grid."""

    throttle_grid: np.ndarray
    speed_grid: np.ndarray
    torque: np.ndarray
    provenance: np.ndarray
    repaired_cells: int = 0

    def __post_init__(self):
        self.throttle_grid = np.asarray(self.throttle_grid, dtype=float)
        self.speed_grid = np.asarray(self.speed_grid, dtype=float)
        self.torque = np.asarray(self.torque, dtype=float)
        self.provenance = np.asarray(self.provenance, dtype="<U1")
        if np.any(np.diff(self.throttle_grid) <= 0) or np.any(np.diff(self.speed_grid) <= 0):
            raise ValueError("map grids must be strictly ascending")
        shape = (len(self.speed_grid), len(self.throttle_grid))
        if self.torque.shape != shape or self.provenance.shape != shape:
            raise ValueError(f"torque table must have shape {shape}")

    def column(self, w_e: float) -> np.ndarray:
        """Torque against throttle at engine speed ``w_e``, linear in speed."""
        sg = self.speed_grid
        if not sg[0] <= w_e <= sg[-1]:
            raise ValueError(f"engine speed {w_e} rpm outside map range [{sg[0]}, {sg[-1]}]")
        i = min(int(np.searchsorted(sg, w_e, side="right")) - 1, len(sg) - 2)
        if len(sg) == 1:
            return self.torque[0].copy()
        f = (w_e - sg[i]) / (sg[i + 1] - sg[i])
        return (1 - f) * self.torque[i] + f * self.torque[i + 1]

    def torque_at(self, w_e: float, throttle: float) -> float:
        """Bilinear lookup; throttle outside the grid holds the end rows."""
        return float(np.interp(throttle, self.throttle_grid, self.column(w_e)))

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.torque, axis=1) >= 0))

    def to_csv(self, path, provenance_path=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rpm\\throttle"] + [repr(float(t)) for t in self.throttle_grid])
            for sp, row in zip(self.speed_grid, self.torque):
                w.writerow([repr(float(sp))] + [repr(float(v)) for v in row])
        if provenance_path:
            with open(provenance_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["rpm\\throttle"] + [repr(float(t)) for t in self.throttle_grid])
                for sp, row in zip(self.speed_grid, self.provenance):
                    w.writerow([repr(float(sp))] + list(row))

    @classmethod
    def from_csv(cls, path, provenance_path=None) -> "EngineTorqueMap":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        throttle = [float(v) for v in rows[0][1:]]
        speed = [float(r[0]) for r in rows[1:]]
        torque = [[float(v) for v in r[1:]] for r in rows[1:]]
        if provenance_path:
            with open(provenance_path, newline="") as fh:
                prov = [r[1:] for r in list(csv.reader(fh))[1:]]
        else:
            prov = [["I"] * len(throttle) for _ in speed]
        return cls(throttle, speed, torque, prov)


def _regular_throttle_grid(sources: Sequence[float], step: float = 5.0) -> np.ndarray:
    lo, hi = min(sources), max(sources)
    regular = np.arange(math.ceil(lo / step) * step, hi + 1e-9, step)
    return np.unique(np.concatenate([np.asarray(sources, dtype=float), regular]))


def build_engine_map(fitted: Sequence[EngineCurveParams], dyno: Dataset | None, vp: VehicleParams,
                     speed_grid=None, throttle_grid=None) -> EngineTorqueMap:
    """Merge fitted torque curves with dynamometer data into one lookup table.

    ``dyno`` holds ``(engine_rpm, throttle_pct) -> torque`` samples.  A
    fitted curve replaces dyno data at the same throttle.  Rows not covered
    by either source are interpolated linearly in throttle between the
    neighbouring source rows (end rows are held beyond the covered range).
    Cells violating torque monotonicity in throttle are projected onto the
    nearest non-decreasing sequence, with a warning.
    """
    if not fitted and (dyno is None or len(dyno) == 0):
        raise ValueError("need at least one fitted curve or dyno data")

    dyno_rows: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    if dyno is not None:
        rpm, thr = dyno.inputs[:, 0], dyno.inputs[:, 1]
        for t in np.unique(thr):
            sel = thr == t
            order = np.argsort(rpm[sel])
            dyno_rows[float(t)] = (rpm[sel][order], dyno.outputs[sel][order])

    if speed_grid is None:
        if dyno_rows:
            speed_grid = np.unique(dyno.inputs[:, 0])
        else:
            speed_grid = np.arange(1000.0, vp.w_e_max + 1e-9, 250.0)
    speed_grid = np.asarray(speed_grid, dtype=float)
    if speed_grid[0] < 0 or speed_grid[-1] > vp.w_e_max:
        raise ValueError("speed grid must lie within [0, w_e_max]")

    source: dict[float, tuple[np.ndarray, str]] = {}
    for t, (r, q) in dyno_rows.items():
        source[t] = (np.interp(speed_grid, r, q), "D")
    for curve in fitted:
        source[float(curve.throttle)] = (engine_torque(speed_grid / vp.w_e_max, curve), "F")

    src_t = np.array(sorted(source))
    if throttle_grid is None:
        throttle_grid = _regular_throttle_grid(src_t)
    throttle_grid = np.asarray(throttle_grid, dtype=float)

    src_table = np.column_stack([source[t][0] for t in src_t])
    torque = np.empty((len(speed_grid), len(throttle_grid)))
    prov = np.empty(torque.shape, dtype="<U1")
    for j, t in enumerate(throttle_grid):
        if float(t) in source:
            torque[:, j], code = source[float(t)]
            prov[:, j] = code
        else:
            torque[:, j] = [np.interp(t, src_t, row) for row in src_table]
            prov[:, j] = "I"

    repaired = 0
    for i in range(len(speed_grid)):
        row = torque[i]
        if np.any(np.diff(row) < 0):
            fixed = _isotonic(row)
            repaired += int(np.count_nonzero(fixed != row))
            torque[i] = fixed
    if repaired:
        warnings.warn(f"engine map: {repaired} cell(s) adjusted to keep torque non-decreasing in throttle")
    return EngineTorqueMap(throttle_grid, speed_grid, torque, prov, repaired)


def inverse_throttle(engine_map: EngineTorqueMap, w_e: float, T_des: float) -> float:
    """Smallest throttle whose torque at ``w_e`` reaches ``T_des``.

    Linear between bracketing throttle rows.  Returns 100 above the map's
    maximum torque and 0 at or below its lowest row.
    """
    col = engine_map.column(w_e)
    if T_des > col[-1]:
        return 100.0
    if T_des <= col[0]:
        return 0.0
    i = int(np.searchsorted(col, T_des, side="left"))
    tg = engine_map.throttle_grid
    frac = (T_des - col[i - 1]) / (col[i] - col[i - 1])
    return float(tg[i - 1] + frac * (tg[i] - tg[i - 1]))


# --------------------------------------------------------------------------
# Lateral control


def cornering_stiffness(p: TireParams) -> float:
    """Slope of the tire curve at its shifted origin, ``B * C * D`` in N/rad."""
    return p.B * p.C * p.D


@dataclass(frozen=True)
class ChassisGeometry:
    l_f: float   # CG to front axle, m
    l_r: float   # CG to rear axle, m
    I_z: float   # yaw inertia, kg*m^2

    def __post_init__(self):
        if min(self.l_f, self.l_r, self.I_z) <= 0:
            raise ValueError("geometry values must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


@dataclass(frozen=True)
class LateralErrorState:
    e_y: float
    e_y_dot: float
    e_psi: float
    e_psi_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.e_y, self.e_y_dot, self.e_psi, self.e_psi_dot])


def error_state_matrices(C_af: float, C_ar: float, m: float, geom: ChassisGeometry,
                         v_x: float) -> tuple[np.ndarray, np.ndarray]:
    """Lateral error dynamics ``xi' = A xi + B delta`` at speed ``v_x``.

    ``C_af`` and ``C_ar`` are single-tire cornering stiffnesses; the model
    counts two tires per axle.
    """
    l_f, l_r, I_z = geom.l_f, geom.l_r, geom.I_z
    cf, cr = 2 * C_af, 2 * C_ar
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(cf + cr) / (m * v_x), (cf + cr) / m, (-cf * l_f + cr * l_r) / (m * v_x)],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, (-cf * l_f + cr * l_r) / (I_z * v_x), (cf * l_f - cr * l_r) / I_z,
         -(cf * l_f**2 + cr * l_r**2) / (I_z * v_x)],
    ])
    B = np.array([[0.0], [cf / m], [0.0], [cf * l_f / I_z]])
    return A, B


def riccati_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of the CARE residual relative to the sum of its term norms."""
    Rinv = np.linalg.inv(R)
    quad = P @ B @ Rinv @ B.T @ P
    res = A.T @ P + P @ A - quad + Q
    scale = 2 * np.linalg.norm(A.T @ P) + np.linalg.norm(quad) + np.linalg.norm(Q)
    return float(np.linalg.norm(res) / scale) if scale > 0 else float(np.linalg.norm(res))


def solve_care(A, B, Q, R, K0=None, tol: float = 1e-13, max_iter: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Newton-Kleinman iteration for ``A'P + PA - PBR^-1B'P + Q = 0``.

    Starts from a stabilizing gain (pole placement when ``K0`` is not given)
    and solves one Lyapunov equation per step.  Returns ``(P, K)``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    Rinv = np.linalg.inv(R)
    if K0 is None:
        rho = max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
        poles = -rho * np.linspace(1.0, 2.0, A.shape[0])
        K0 = scipy.signal.place_poles(A, B, poles).gain_matrix
    K = np.atleast_2d(K0)
    if np.max(np.linalg.eigvals(A - B @ K).real) >= 0:
        raise ControlDesignError("initial gain is not stabilizing")
    P = None
    for _ in range(max_iter):
        Acl = A - B @ K
        P_new = scipy.linalg.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P_new = 0.5 * (P_new + P_new.T)
        K = Rinv @ B.T @ P_new
        converged = P is not None and np.linalg.norm(P_new - P) <= tol * np.linalg.norm(P_new)
        P = P_new
        if converged or riccati_residual(A, B, Q, R, P) <= tol:
            break
    return P, K


@dataclass
class LqrGainTable:
    velocity_breakpoints: np.ndarray
    gains: np.ndarray                 # (n_intervals, 4)
    Q: np.ndarray
    R: np.ndarray
    representative_speeds: np.ndarray = field(default=None)
    residuals: np.ndarray = field(default=None)
    closed_loop_max_real: np.ndarray = field(default=None)

    def interval_index(self, v_x: float) -> int:
        i = int(np.searchsorted(self.velocity_breakpoints, v_x, side="right")) - 1
        return min(max(i, 0), len(self.gains) - 1)

    def gain(self, v_x: float) -> np.ndarray:
        """Gain of the interval containing ``v_x`` (end intervals extend outward)."""
        return self.gains[self.interval_index(v_x)]

    def to_dict(self) -> dict:
        bp = self.velocity_breakpoints
        return {
            "intervals": [[float(bp[i]), float(bp[i + 1])] for i in range(len(self.gains))],
            "representative_speeds": [float(v) for v in self.representative_speeds],
            "gains": [[float(k) for k in row] for row in self.gains],
            "Q": np.asarray(self.Q).tolist(),
            "R": np.asarray(self.R).tolist(),
            "riccati_residuals": [float(r) for r in self.residuals],
            "closed_loop_max_real_eig": [float(e) for e in self.closed_loop_max_real],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LqrGainTable":
        iv = d["intervals"]
        bp = np.array([iv[0][0]] + [b for _, b in iv])
        return cls(bp, np.array(d["gains"]), np.array(d["Q"]), np.array(d["R"]),
                   np.array(d["representative_speeds"]), np.array(d.get("riccati_residuals", [])),
                   np.array(d.get("closed_loop_max_real_eig", [])))


def lqr_gain_table(C_af: float, C_ar: float, vp: VehicleParams, geom: ChassisGeometry, Q, R,
                   velocity_breakpoints: Sequence[float], residual_tol: float = 1e-8) -> LqrGainTable:
    """Offline LQR gains for each velocity interval, designed at the interval midpoint."""
    bp = np.asarray(velocity_breakpoints, dtype=float)
    if len(bp) < 2 or np.any(np.diff(bp) <= 0) or bp[0] <= 0:
        raise ValueError("velocity breakpoints must be positive and strictly ascending")
    if C_af <= 0 or C_ar <= 0:
        raise ValueError("cornering stiffnesses must be positive")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12 or np.any(np.linalg.eigvalsh(R) <= 0):
        raise ValueError("Q must be positive semidefinite and R positive definite")

    mids = 0.5 * (bp[:-1] + bp[1:])
    gains, residuals, worst = [], [], []
    for lo, hi, v in zip(bp[:-1], bp[1:], mids):
        A, B = error_state_matrices(C_af, C_ar, vp.m, geom, v)
        try:
            P, K = solve_care(A, B, Q, R)
        except (np.linalg.LinAlgError, ValueError, ControlDesignError) as exc:
            raise ControlDesignError(f"interval [{lo}, {hi}] m/s: {exc}") from exc
        eig = np.linalg.eigvals(A - B @ K)
        res = riccati_residual(A, B, Q, R, P)
        if np.max(eig.real) >= 0:
            raise ControlDesignError(f"interval [{lo}, {hi}] m/s: closed loop not Hurwitz")
        if res > residual_tol:
            raise ControlDesignError(f"interval [{lo}, {hi}] m/s: Riccati residual {res:.3g} > {residual_tol}")
        gains.append(K.ravel())
        residuals.append(res)
        worst.append(float(np.max(eig.real)))
    return LqrGainTable(bp, np.array(gains), Q, R, mids, np.array(residuals), np.array(worst))


def steering_command(xi: LateralErrorState | np.ndarray, v_x: float, table: LqrGainTable,
                     max_steer: float = 0.35) -> float:
    """State feedback ``-K(v_x) xi`` saturated to ``+-max_steer`` rad."""
    x = xi.as_array() if isinstance(xi, LateralErrorState) else np.asarray(xi, dtype=float)
    return float(np.clip(-table.gain(v_x) @ x, -max_steer, max_steer))

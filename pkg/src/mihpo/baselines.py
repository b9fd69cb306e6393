"""Reference optimizers sharing the black-box objective interface.

``run_gbo`` is steepest descent on a central-difference gradient, ``run_pso``
is a global-best particle swarm.  Both report best-so-far curves against the
cumulative number of objective calls so they can be compared with
:func:`mihpo.optimizer.run_mihpo` at an equal evaluation budget.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .optimizer import ObjectiveFn, OptimizationReport, ParamConfig, ParamSpace, sample_configs


def _safe(loss) -> float:
    loss = float(loss)
    return loss if math.isfinite(loss) else math.inf


@dataclass(frozen=True)
class GboSettings:
    learning_rate: float
    max_evaluations: int
    fd_step: float = 1e-6
    normalize: bool = False
    loss_scale: float = 1.0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be > 0")
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be >= 1")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be > 0")


def run_gbo(space: ParamSpace, objective: ObjectiveFn, settings: GboSettings, seed: int = 0,
            start=None) -> OptimizationReport:
    """Gradient descent with a central finite-difference gradient, clamped to bounds.

    Each iteration costs ``2 * n_p + 1`` objective calls: the current point
    plus two probes per coordinate.  The probe step is
    ``fd_step * max(|x_i|, 1)``.

    The descended function is ``loss / settings.loss_scale``; dividing the
    loss by ``c`` and multiplying the learning rate by ``c`` leaves the
    iterates unchanged.  With ``settings.normalize`` the descent runs in
    unit-box coordinates ``(p - lower) / (upper - lower)`` instead.

    Stops early when the loss or gradient becomes non-finite, or when the
    loss exceeds ``divergence_factor`` times the starting loss.
    """
    t0 = time.perf_counter()
    n_p = len(space)
    if start is None:
        start = sample_configs(space, 1, [seed, 0x6B0])[0].values
    start = space.clamp(np.asarray(start, dtype=float))

    if settings.normalize:
        lower, span = space.lower, space.span
        to_x = lambda u: lower + u * span
        x = (start - lower) / span
        lo, hi = np.zeros(n_p), np.ones(n_p)
    else:
        to_x = lambda u: u
        x = start.copy()
        lo, hi = space.lower, space.upper
    scale = settings.loss_scale
    f = lambda u: _safe(objective(to_x(u))) / scale

    per_iter = 2 * n_p + 1
    evals = 0
    best_x, best = None, math.inf
    initial = None
    curve: list[tuple[int, float]] = []
    stop = "budget exhausted"
    while evals + per_iter <= settings.max_evaluations:
        fx = f(x)
        evals += 1
        grad = np.empty(n_p)
        for i in range(n_p):
            h = settings.fd_step * max(abs(x[i]), 1.0)
            e = np.zeros(n_p)
            e[i] = h
            grad[i] = (f(x + e) - f(x - e)) / (2 * h)
        evals += 2 * n_p
        if initial is None:
            initial = fx
        if fx < best:
            best, best_x = fx, x.copy()
        curve.append((evals, best * scale))
        if not math.isfinite(fx) or not np.all(np.isfinite(grad)):
            stop = "non-finite loss or gradient"
            break
        if fx > settings.divergence_factor * initial:
            stop = f"diverged: loss {fx:.6g} > {settings.divergence_factor} x initial {initial:.6g}"
            break
        x = np.clip(x - settings.learning_rate * grad, lo, hi)

    if best_x is None:
        raise ValueError("evaluation budget too small for a single gradient iteration")
    return OptimizationReport(
        best_config=ParamConfig(to_x(best_x), best * scale, evals),
        loss_curve=curve,
        wall_time_seconds=time.perf_counter() - t0,
        total_evaluations=evals,
        method="gbo",
        param_names=space.names,
        stop_reason=stop,
    )


@dataclass(frozen=True)
class PsoSettings:
    n_particles: int
    max_evaluations: int
    inertia: float = 0.729
    cognitive_coeff: float = 1.49445
    social_coeff: float = 1.49445

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("a swarm needs at least two particles")
        if self.max_evaluations < self.n_particles:
            raise ValueError("budget must cover at least the initial swarm")


def run_pso(space: ParamSpace, objective: ObjectiveFn, settings: PsoSettings, seed: int = 0,
            init=None, jobs: int = 1) -> OptimizationReport:
    """Global-best particle swarm with positions clamped to the space bounds.

    Particles start from the space's normal prior (or ``init``) at rest.
    Velocities are limited to one parameter span per step.
    """
    t0 = time.perf_counter()
    n, n_p = settings.n_particles, len(space)
    rng = np.random.default_rng([seed, 0x950])
    if init is None:
        x = np.array([c.values for c in sample_configs(space, n, [seed, 0x951])])
    else:
        x = space.clamp(np.array(init, dtype=float).reshape(n, n_p))
    v = np.zeros_like(x)
    vmax = space.span

    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None

    def evaluate(points):
        if pool:
            return np.array(list(pool.map(lambda q: _safe(objective(q)), points)))
        return np.array([_safe(objective(q)) for q in points])

    try:
        fx = evaluate(x)
        evals = n
        pbest, pbest_f = x.copy(), fx.copy()
        g = int(np.argmin(pbest_f))
        curve = [(evals, float(pbest_f[g]))]
        while evals + n <= settings.max_evaluations:
            r1 = rng.random((n, n_p))
            r2 = rng.random((n, n_p))
            v = (settings.inertia * v
                 + settings.cognitive_coeff * r1 * (pbest - x)
                 + settings.social_coeff * r2 * (pbest[g] - x))
            v = np.clip(v, -vmax, vmax)
            x = space.clamp(x + v)
            fx = evaluate(x)
            evals += n
            better = fx < pbest_f
            pbest[better] = x[better]
            pbest_f[better] = fx[better]
            g = int(np.argmin(pbest_f))
            curve.append((evals, float(pbest_f[g])))
    finally:
        if pool:
            pool.shutdown()

    return OptimizationReport(
        best_config=ParamConfig(pbest[g].copy(), float(pbest_f[g]), evals),
        loss_curve=curve,
        wall_time_seconds=time.perf_counter() - t0,
        total_evaluations=evals,
        method="pso",
        param_names=space.names,
        stop_reason="budget exhausted",
    )

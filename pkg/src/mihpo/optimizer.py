"""Hyperband-style successive halving with Gaussian-mutation local search.

Each bracket samples a population from a normal prior over the parameter
space, then repeatedly hill-climbs every survivor for a growing number of
mutation iterations and keeps the best ``1/eta`` fraction.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

ObjectiveFn = Callable[[np.ndarray], float]


def _finite_or_inf(loss: float) -> float:
    loss = float(loss)
    return loss if math.isfinite(loss) else math.inf


@dataclass(frozen=True)
class ParamSpec:
    name: str
    mean: float
    std: float
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower bound {self.lower} must be < upper bound {self.upper}")
        if not self.std > 0:
            raise ValueError(f"{self.name}: std must be positive, got {self.std}")
        if not self.lower <= self.mean <= self.upper:
            raise ValueError(f"{self.name}: mean {self.mean} outside [{self.lower}, {self.upper}]")


class ParamSpace:
    """Ordered collection of bounded parameters with a normal sampling prior."""

    def __init__(self, specs: Sequence[ParamSpec]):
        if not specs:
            raise ValueError("a parameter space needs at least one parameter")
        self.specs = tuple(specs)
        self.names = tuple(s.name for s in self.specs)
        self.mean = np.array([s.mean for s in self.specs], dtype=float)
        self.std = np.array([s.std for s in self.specs], dtype=float)
        self.lower = np.array([s.lower for s in self.specs], dtype=float)
        self.upper = np.array([s.upper for s in self.specs], dtype=float)

    def __len__(self):
        return len(self.specs)

    def __repr__(self):
        return f"ParamSpace({list(self.names)})"

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def clamp(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lower, self.upper)

    def contains(self, values: np.ndarray) -> bool:
        values = np.asarray(values)
        return bool(np.all(values >= self.lower) and np.all(values <= self.upper))

    @classmethod
    def from_dicts(cls, rows: Sequence[dict]) -> "ParamSpace":
        """Build from ``{"name", "mean", "std", "min", "max"}`` records."""
        return cls([ParamSpec(r["name"], float(r["mean"]), float(r["std"]), float(r["min"]), float(r["max"]))
                    for r in rows])

    def to_dicts(self) -> list[dict]:
        return [{"name": s.name, "mean": s.mean, "std": s.std, "min": s.lower, "max": s.upper}
                for s in self.specs]


@dataclass
class ParamConfig:
    """A point in parameter space plus the bookkeeping the optimizer attaches to it."""

    values: np.ndarray
    loss: float | None = None
    resource_spent: int = 0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.loss is not None and not (math.isfinite(self.loss) or self.loss == math.inf):
            raise ValueError(f"loss must be finite or +inf, got {self.loss}")
        if self.loss is not None and self.loss < 0:
            raise ValueError(f"loss must be non-negative, got {self.loss}")

    def copy(self) -> "ParamConfig":
        return ParamConfig(self.values.copy(), self.loss, self.resource_spent)

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = names or [f"p{i}" for i in range(len(self.values))]
        return {
            "values": dict(zip(names, (float(v) for v in self.values))),
            "loss": self.loss,
            "resource_spent": self.resource_spent,
        }


@dataclass(frozen=True)
class MutationPolicy:
    """Per-parameter mutation scale, linearly annealed from ``sigma_max`` to ``sigma_min``."""

    sigma_max: np.ndarray
    sigma_min: np.ndarray
    seed: int = 0

    def __post_init__(self):
        smax = np.array(self.sigma_max, dtype=float)
        smin = np.array(self.sigma_min, dtype=float)
        if smax.shape != smin.shape:
            raise ValueError("sigma_max and sigma_min must have the same length")
        if np.any(smin < 0) or np.any(smin > smax):
            raise ValueError("need 0 <= sigma_min <= sigma_max element-wise")
        object.__setattr__(self, "sigma_max", smax)
        object.__setattr__(self, "sigma_min", smin)

    def sigma(self, t: float) -> np.ndarray:
        return self.sigma_max + t * (self.sigma_min - self.sigma_max)

    @classmethod
    def from_space(cls, space: ParamSpace, max_frac: float = 0.1, min_frac: float = 0.001,
                   seed: int = 0) -> "MutationPolicy":
        return cls(max_frac * space.span, min_frac * space.span, seed)


@dataclass(frozen=True)
class Rung:
    n_j: int
    r_j: int
    k_j: int
    r_exact: Fraction


@dataclass(frozen=True)
class Bracket:
    s: int
    n: int
    r: Fraction
    rungs: tuple[Rung, ...]

    @property
    def evaluations(self) -> int:
        return sum(rung.n_j * rung.r_j for rung in self.rungs)


@dataclass(frozen=True)
class HyperbandSchedule:
    R: int
    eta: int
    s_max: int
    B: int
    brackets: tuple[Bracket, ...]

    @property
    def total_evaluations(self) -> int:
        return sum(b.evaluations for b in self.brackets)


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def build_schedule(R: int, eta: int) -> HyperbandSchedule:
    """Derive the bracket/rung structure for maximum resource ``R`` and discard rate ``eta``.

    All arithmetic is exact.  Fractional per-rung resources ``r * eta**j`` are
    rounded half-up to whole iterations, with a floor of one.
    """
    if int(eta) != eta or eta < 2:
        raise ValueError(f"eta must be an integer >= 2, got {eta}")
    if int(R) != R or R < 1:
        raise ValueError(f"R must be a positive integer, got {R}")
    R, eta = int(R), int(eta)

    # floor(log_eta(R)) without floating-point log
    s_max = 0
    while eta ** (s_max + 1) <= R:
        s_max += 1
    B = (s_max + 1) * R

    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-(B // R) * eta**s // (s + 1))
        r = Fraction(R, eta**s)
        rungs = []
        for j in range(s + 1):
            n_j = n // eta**j
            r_exact = r * eta**j
            rungs.append(Rung(n_j=n_j, r_j=max(1, _round_half_up(r_exact)), k_j=n_j // eta, r_exact=r_exact))
        brackets.append(Bracket(s=s, n=n, r=r, rungs=tuple(rungs)))
    return HyperbandSchedule(R=R, eta=eta, s_max=s_max, B=B, brackets=tuple(brackets))


def sample_configs(space: ParamSpace, n: int, seed) -> list[ParamConfig]:
    """Draw ``n`` configurations from the space's normal prior, clamped to its bounds."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    draws = space.clamp(rng.normal(space.mean, space.std, size=(n, len(space))))
    return [ParamConfig(row) for row in draws]


def eval_with_mutation(p: ParamConfig, r_j: int, objective: ObjectiveFn, policy: MutationPolicy,
                       rng: np.random.Generator, space: ParamSpace,
                       improvements: list | None = None) -> tuple[ParamConfig, float]:
    """Spend ``r_j`` objective evaluations hill-climbing from ``p``.

    Every iteration proposes ``p + sigma(t) * eps`` with ``t = k / r_j`` and
    keeps it only if its loss is strictly lower.  A configuration that has
    never been evaluated spends its first iteration on its own loss.

    If ``improvements`` is given, ``(k, loss)`` is appended each time the
    tracked loss is set or lowered, ``k`` being the 0-based iteration index.
    """
    if r_j < 1:
        raise ValueError(f"r_j must be >= 1, got {r_j}")
    values = p.values.copy()
    loss = p.loss
    t = np.arange(r_j)[:, None] / r_j
    steps = (policy.sigma_max + t * (policy.sigma_min - policy.sigma_max)) * rng.standard_normal((r_j, len(values)))
    lower, upper = space.lower, space.upper
    start = 0
    if loss is None:
        loss = _finite_or_inf(objective(values))
        if improvements is not None:
            improvements.append((0, loss))
        start = 1
    for k in range(start, r_j):
        candidate = np.minimum(np.maximum(values + steps[k], lower), upper)
        cand_loss = objective(candidate)
        if cand_loss < loss:
            values, loss = candidate, float(cand_loss)
            if improvements is not None:
                improvements.append((k, loss))
    return ParamConfig(values, loss, p.resource_spent + r_j), loss


def select_top_k(P: Sequence[ParamConfig], L: Sequence[float], k: int) -> list[ParamConfig]:
    """Return the ``k`` lowest-loss configurations, ties broken by list position."""
    if len(P) != len(L):
        raise ValueError(f"got {len(P)} configs but {len(L)} losses")
    if not 0 <= k <= len(P):
        raise ValueError(f"k={k} outside [0, {len(P)}]")
    keys = np.array([_finite_or_inf(x) for x in L], dtype=float)
    order = np.argsort(keys, kind="stable")[:k]
    return [P[i] for i in order]


@dataclass
class OptimizationReport:
    best_config: ParamConfig
    loss_curve: list[tuple[int, float]]
    wall_time_seconds: float
    total_evaluations: int
    bracket_traces: list[dict] = field(default_factory=list)
    method: str = "mihpo"
    param_names: tuple[str, ...] = ()
    stop_reason: str | None = None

    @property
    def best_loss(self) -> float:
        return self.best_config.loss

    def evaluations_to_reach(self, threshold: float) -> int | None:
        """First cumulative evaluation count at which best-so-far <= threshold."""
        for evals, loss in self.loss_curve:
            if loss <= threshold:
                return evals
        return None

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "method": self.method,
            "best_config": self.best_config.to_dict(self.param_names or None),
            "total_evaluations": self.total_evaluations,
            "loss_curve": [[int(e), float(l)] for e, l in self.loss_curve],
            "bracket_traces": self.bracket_traces,
            "stop_reason": self.stop_reason,
        }
        if include_timing:
            out["wall_time_seconds"] = self.wall_time_seconds
        return out

    def write_json(self, path, include_timing: bool = True) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_timing), fh, indent=2)

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["evaluations", "best_loss"])
            for evals, loss in self.loss_curve:
                writer.writerow([evals, repr(float(loss))])


class _CurveRecorder:
    """Tracks the global best in canonical (serial, config-major) evaluation order."""

    def __init__(self):
        self.evaluations = 0
        self.best: ParamConfig | None = None
        self.curve: list[tuple[int, float]] = []

    def absorb(self, config: ParamConfig, improvements, spent: int):
        for k, loss in improvements:
            if self.best is None or loss < self.best.loss:
                self.curve.append((self.evaluations + k + 1, loss))
        if self.best is None or config.loss < self.best.loss:
            self.best = config.copy()
        self.evaluations += spent


def run_mihpo(space: ParamSpace, objective: ObjectiveFn, R: int, eta: int, policy: MutationPolicy,
              seed: int = 0, jobs: int = 1) -> OptimizationReport:
    """Run every bracket of the schedule and return the best configuration seen.

    ``jobs > 1`` evaluates the configurations of a rung on a thread pool.
    Every configuration draws from its own stream keyed by
    ``(policy.seed, seed, s, j, index)``, so results do not depend on ``jobs``.
    """
    schedule = build_schedule(R, eta)
    if len(policy.sigma_max) != len(space):
        raise ValueError("mutation policy and parameter space differ in dimension")
    t0 = time.perf_counter()
    recorder = _CurveRecorder()
    traces = []
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        for bracket in schedule.brackets:
            s = bracket.s
            P = sample_configs(space, bracket.n, [seed, s, 0x5A4D])
            rung_best = []
            for j, rung in enumerate(bracket.rungs):
                def work(item, j=j, rung=rung):
                    i, p = item
                    rng = np.random.default_rng([policy.seed, seed, s, j, i])
                    imp: list = []
                    new_p, loss = eval_with_mutation(p, rung.r_j, objective, policy, rng, space, imp)
                    return new_p, loss, imp

                items = list(enumerate(P))
                results = list(pool.map(work, items)) if pool else [work(it) for it in items]
                for new_p, _, imp in results:
                    recorder.absorb(new_p, imp, rung.r_j)
                P = [res[0] for res in results]
                L = [res[1] for res in results]
                rung_best.append(min(L))
                P = select_top_k(P, L, rung.k_j)
            traces.append({"s": s, "n": bracket.n, "r": float(bracket.r),
                           "best_loss": min(rung_best), "rung_best_losses": rung_best})
    finally:
        if pool:
            pool.shutdown()

    assert recorder.evaluations == schedule.total_evaluations
    return OptimizationReport(
        best_config=recorder.best,
        loss_curve=recorder.curve,
        wall_time_seconds=time.perf_counter() - t0,
        total_evaluations=recorder.evaluations,
        bracket_traces=traces,
        method="mihpo",
        param_names=space.names,
    )

"""JSON optimizer configuration shared by the fit and compare commands.

Schema::

    {
      "params": [{"name", "mean", "std", "min", "max"}, ...],   # optional
      "method": "mihpo" | "gbo" | "pso",
      "R": 10000, "eta": 5, "seed": 0,
      "sigma_max_frac": 0.1, "sigma_min_frac": 0.001,
      "max_evaluations": null,            # baselines; defaults to the MI-HPO budget
      "gbo": {"learning_rate": ..., "fd_step": ..., "normalize": ..., "loss_scale": ...},
      "pso": {"n_particles": ..., "inertia": ..., "cognitive_coeff": ..., "social_coeff": ...},
      "variants": {"label": {"method": "gbo", "learning_rate": ...}, ...}
    }
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import GboSettings, PsoSettings, run_gbo, run_pso
from .optimizer import MutationPolicy, OptimizationReport, ParamSpace, build_schedule, run_mihpo

METHODS = ("mihpo", "gbo", "pso")

_GBO_KEYS = {"learning_rate", "fd_step", "normalize", "loss_scale", "divergence_factor"}
_PSO_KEYS = {"n_particles", "inertia", "cognitive_coeff", "social_coeff"}
_TOP_KEYS = {"params", "method", "R", "eta", "seed", "sigma_max_frac", "sigma_min_frac", "max_evaluations",
             "gbo", "pso", "variants"}


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    space: ParamSpace | None = None
    method: str = "mihpo"
    R: int = 10000
    eta: int = 5
    seed: int = 0
    sigma_max_frac: float = 0.1
    sigma_min_frac: float = 0.001
    max_evaluations: int | None = None
    gbo: dict = field(default_factory=dict)
    pso: dict = field(default_factory=dict)
    variants: dict = field(default_factory=dict)
    source: str | None = None

    @property
    def budget(self) -> int:
        """Evaluation budget shared by every method: the MI-HPO schedule total unless overridden."""
        if self.max_evaluations is not None:
            return self.max_evaluations
        return build_schedule(self.R, self.eta).total_evaluations

    def labels(self) -> list[str]:
        return list(METHODS) + [k for k in self.variants if k not in METHODS]

    def resolve(self, label: str) -> tuple[str, dict]:
        """Method name and settings for a method or variant label."""
        if label in self.variants:
            v = dict(self.variants[label])
            method = v.pop("method", None)
            if method not in METHODS:
                raise ConfigError(f"variant {label!r}: method must be one of {METHODS}")
            base = {"gbo": self.gbo, "pso": self.pso}.get(method, {})
            return method, {**base, **v}
        if label == "mihpo":
            return "mihpo", {}
        if label == "gbo":
            return "gbo", dict(self.gbo)
        if label == "pso":
            return "pso", dict(self.pso)
        raise ConfigError(f"unknown method or variant {label!r}; known: {self.labels()}")


def parse_config(doc: dict, source: str | None = None) -> OptimizerConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    try:
        space = ParamSpace.from_dicts(doc["params"]) if doc.get("params") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad params block: {exc}") from exc
    method = doc.get("method", "mihpo")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    try:
        cfg = OptimizerConfig(
            space=space,
            method=method,
            R=int(doc.get("R", 10000)),
            eta=int(doc.get("eta", 5)),
            seed=int(doc.get("seed", 0)),
            sigma_max_frac=float(doc.get("sigma_max_frac", 0.1)),
            sigma_min_frac=float(doc.get("sigma_min_frac", 0.001)),
            max_evaluations=None if doc.get("max_evaluations") is None else int(doc["max_evaluations"]),
            gbo=dict(doc.get("gbo", {})),
            pso=dict(doc.get("pso", {})),
            variants={str(k): dict(v) for k, v in doc.get("variants", {}).items()},
            source=source,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if cfg.R < 1 or cfg.eta < 2:
        raise ConfigError("R must be >= 1 and eta >= 2")
    if not 0 <= cfg.sigma_min_frac <= cfg.sigma_max_frac:
        raise ConfigError("need 0 <= sigma_min_frac <= sigma_max_frac")
    if cfg.max_evaluations is not None and cfg.max_evaluations < 1:
        raise ConfigError("max_evaluations must be positive")
    for label in cfg.variants:
        cfg.resolve(label)
    return cfg


def load_config(path) -> OptimizerConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, str(path))


def _pick(settings: dict, allowed: set, method: str) -> dict:
    extra = set(settings) - allowed
    if extra:
        raise ConfigError(f"unknown {method} setting(s): {sorted(extra)}")
    return settings


def run_method(label: str, cfg: OptimizerConfig, space: ParamSpace, objective, seed: int,
               jobs: int = 1) -> OptimizationReport:
    """Run one configured method (or variant) with the shared evaluation budget."""
    method, settings = cfg.resolve(label)
    if method == "mihpo":
        policy = MutationPolicy.from_space(space, cfg.sigma_max_frac, cfg.sigma_min_frac, seed)
        report = run_mihpo(space, objective, cfg.R, cfg.eta, policy, seed, jobs)
    elif method == "gbo":
        s = _pick(settings, _GBO_KEYS, "gbo")
        if "learning_rate" not in s:
            raise ConfigError(f"{label}: gbo needs a learning_rate")
        try:
            gbo = GboSettings(max_evaluations=cfg.budget, **s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{label}: {exc}") from exc
        report = run_gbo(space, objective, gbo, seed)
    else:
        s = _pick(settings, _PSO_KEYS, "pso")
        try:
            pso = PsoSettings(max_evaluations=cfg.budget, **{"n_particles": 500, **s})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{label}: {exc}") from exc
        report = run_pso(space, objective, pso, seed, jobs=jobs)
    report.method = label
    return report

"""Vehicle model identification with Hyperband-scheduled mutation search.

Fits tire, engine-curve and brake models by black-box loss minimization,
then feeds the identified parameters to a tire-aware velocity planner, an
engine torque map and a velocity-scheduled LQR steering controller.
"""
from .baselines import GboSettings, PsoSettings, run_gbo, run_pso
from .objective import DataError, Dataset, MSEObjective, SyntheticSpec, generate_synthetic, load_csv, mse_objective
from .optimizer import (HyperbandSchedule, MutationPolicy, OptimizationReport, ParamConfig, ParamSpace, ParamSpec,
                        build_schedule, eval_with_mutation, run_mihpo, sample_configs, select_top_k)

__version__ = "0.1.0"

__all__ = [
    "DataError", "Dataset", "GboSettings", "HyperbandSchedule", "MSEObjective", "MutationPolicy",
    "OptimizationReport", "ParamConfig", "ParamSpace", "ParamSpec", "PsoSettings", "SyntheticSpec",
    "build_schedule", "eval_with_mutation", "generate_synthetic", "load_csv", "mse_objective", "run_gbo",
    "run_mihpo", "run_pso", "sample_configs", "select_top_k",
]

"""Datasets, the mean-squared-error objective, CSV ingestion and synthetic data."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for missing, malformed or empty input data."""


@dataclass(frozen=True)
class Dataset:
    """Immutable input/output sample pairs.

    ``inputs`` has shape ``(N, d)``; ``outputs`` has shape ``(N,)``.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    name: str = "dataset"
    input_names: tuple[str, ...] = ()
    output_name: str = "y"

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.outputs, dtype=float).reshape(-1)
        if x.ndim != 2 or len(x) != len(y):
            raise DataError(f"{self.name}: {len(x)} input rows vs {len(y)} outputs")
        if len(y) == 0:
            raise DataError(f"{self.name}: dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError(f"{self.name}: non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        if not self.input_names:
            object.__setattr__(self, "input_names", tuple(f"x{i}" for i in range(x.shape[1])))

    def __len__(self):
        return len(self.outputs)

    @property
    def x(self) -> np.ndarray:
        """Inputs flattened to 1-D when the dataset has a single input column."""
        return self.inputs[:, 0] if self.inputs.shape[1] == 1 else self.inputs

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.outputs[idx], self.name, self.input_names, self.output_name)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.inputs, other.inputs]), np.concatenate([self.outputs, other.outputs]),
                       self.name, self.input_names, self.output_name)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([*self.input_names, self.output_name])
            for row, y in zip(self.inputs, self.outputs):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])


class MSEObjective:
    """Callable ``values -> mean((y - f(x; values))**2)`` bound to one model and dataset."""

    def __init__(self, model, dataset: Dataset):
        self.model = model
        self.dataset = dataset
        self._x = np.ascontiguousarray(dataset.x)
        self._y = dataset.outputs

    def __call__(self, values) -> float:
        resid = self._y - self.model.predict(self._x, values)
        return float(np.mean(resid * resid))


def mse_objective(model, p, D: Dataset) -> float:
    """Mean squared residual of ``model`` with parameters ``p`` over ``D``.

    ``p`` may be a ``ParamConfig`` or a plain vector.  A non-finite
    prediction yields a non-finite loss; the optimizers treat that as +inf.
    """
    values = getattr(p, "values", p)
    return MSEObjective(model, D)(np.asarray(values, dtype=float))


def load_csv(path, input_columns: Sequence[str], output_column: str, name: str | None = None) -> Dataset:
    """Read a comma-separated file with a header row.

    Rows whose selected fields are not finite numbers are dropped with a
    warning stating how many were rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        cols = list(input_columns) + [output_column]
        missing = [c for c in cols if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header is {header}")
        idx = [header.index(c) for c in cols]
        rows, rejected = [], 0
        for raw in reader:
            if not raw or all(not f.strip() for f in raw):
                continue
            try:
                vals = [float(raw[i]) for i in idx]
            except (ValueError, IndexError):
                rejected += 1
                continue
            if all(math.isfinite(v) for v in vals):
                rows.append(vals)
            else:
                rejected += 1
    if rejected:
        warnings.warn(f"{path}: rejected {rejected} row(s) with non-finite or unparsable fields")
    if not rows:
        raise DataError(f"{path}: no usable rows")
    arr = np.array(rows, dtype=float)
    return Dataset(arr[:, :-1], arr[:, -1], name or path.stem, tuple(input_columns), output_column)


@dataclass(frozen=True)
class SyntheticSpec:
    ground_truth: np.ndarray
    input_range: tuple[tuple[float, float], ...]
    n_samples: int
    noise_std: float
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for lo, hi in self.input_range:
            if not lo <= hi:
                raise ValueError(f"bad input range [{lo}, {hi}]")


def generate_synthetic(model, spec: SyntheticSpec, name: str | None = None) -> Dataset:
    """Sample inputs uniformly over ``spec.input_range`` and add Gaussian output noise."""
    truth = np.asarray(getattr(spec.ground_truth, "values", spec.ground_truth), dtype=float)
    if len(truth) != len(model.param_names):
        raise ValueError(f"{model.name} takes {len(model.param_names)} parameters, got {len(truth)}")
    rng = np.random.default_rng(spec.seed)
    lo = np.array([r[0] for r in spec.input_range], dtype=float)
    hi = np.array([r[1] for r in spec.input_range], dtype=float)
    x = rng.uniform(lo, hi, size=(spec.n_samples, len(lo)))
    noise = rng.normal(0.0, spec.noise_std, size=spec.n_samples) if spec.noise_std > 0 else 0.0
    xin = x[:, 0] if x.shape[1] == 1 else x
    y = model.predict(xin, truth) + noise
    return Dataset(x, y, name or f"{model.name}_synthetic", model.input_names, model.output_name)

"""Task metrics, the forgetting matrix and multi-run aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import LabeledDataset
from .nn import ModelGraph, ParamSet, forward

STD_CONVENTION = "sample std (ddof=1); 0 when runs=1"


def predict(model: ModelGraph, params: ParamSet, images: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            outs.append(forward(model, params, images[start:start + chunk]))
    return torch.cat(outs)


def evaluate(model: ModelGraph, params: ParamSet, ds: LabeledDataset) -> float:
    """Accuracy for classifiers, mean absolute error for regressors."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    expects = "classification" if model.output_kind == "class_logits" else "regression"
    if ds.task_kind != expects:
        raise ValueError(f"{model.output_kind} model cannot be scored on a {ds.task_kind} dataset")
    out = predict(model, params, ds.images)
    if ds.task_kind == "classification":
        return float((out.argmax(dim=1) == ds.labels).to(torch.float64).mean())
    return float((out.reshape(-1).double() - ds.labels.double()).abs().mean())


@dataclass(frozen=True)
class ForgettingMatrix:
    values: np.ndarray  # values[i, j]: model after institution j, scored on institution i's data
    metric: str = "accuracy"
    cycle: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("forgetting matrix must be square")
        if self.values.shape[0] < 2:
            raise ValueError("forgetting matrix needs K >= 2")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def max_forgetting_gap(self) -> float:
        """Largest drop of an off-diagonal entry below its row's diagonal entry."""
        v = self.values
        return max(v[i, i] - v[i, j] for i in range(self.K) for j in range(self.K) if i != j)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["data\\model"] + [f"Inst{j + 1}" for j in range(self.K)])
        for i in range(self.K):
            w.writerow([f"Inst{i + 1}"] + [f"{x:.6f}" for x in self.values[i]])
        return buf.getvalue()


def forgetting_matrix(
    model: ModelGraph,
    checkpoints: Sequence[ParamSet],
    datasets: Sequence[LabeledDataset],
    cycle: int = 0,
) -> ForgettingMatrix:
    if len(checkpoints) != len(datasets):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(datasets)} datasets")
    k = len(checkpoints)
    values = np.array([[evaluate(model, checkpoints[j], datasets[i]) for j in range(k)] for i in range(k)])
    metric = "accuracy" if model.output_kind == "class_logits" else "mae"
    return ForgettingMatrix(values, metric, cycle)


@dataclass(frozen=True)
class RunSummary:
    mean: float
    std: float
    runs: int


def aggregate_runs(values: Sequence[float]) -> RunSummary:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no run results to aggregate")
    arr = np.sort(np.asarray(vals, dtype=np.float64))
    mean = float(math.fsum(arr) / arr.size)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return RunSummary(mean, std, arr.size)

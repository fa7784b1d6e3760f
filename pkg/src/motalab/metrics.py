"""Continual-learning metrics, drift accounting and the mode/drift trade-off.

Task indices are 1-based throughout, matching how results are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .task_stream import TaskDataset


class IncompleteMatrixError(ValueError):
    pass


class CapacityError(ValueError):
    pass


MULTI_TASK_CONVENTION = {"bwt": 0.0, "fwt": 0.0, "remembering": 1.0, "forgetting": 0.0}


@dataclass
class AccuracyMatrix:
    """``acc[t-1, v-1]`` is the accuracy on task ``v`` after learning task ``t``.

    Entries above the diagonal are optional (NaN when absent) and only feed
    forward transfer. ``init_row[v-1]`` scores the untrained model.
    """

    acc: np.ndarray
    init_row: np.ndarray

    def __post_init__(self):
        self.acc = np.asarray(self.acc, dtype=float)
        self.init_row = np.asarray(self.init_row, dtype=float)
        T = self.acc.shape[0]
        if self.acc.shape != (T, T) or self.init_row.shape != (T,):
            raise ValueError("accuracy matrix must be T x T with an init row of length T")
        finite = self.acc[~np.isnan(self.acc)]
        if ((finite < 0) | (finite > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], init_row: Sequence[float],
                  upper: dict[tuple[int, int], float] | None = None) -> "AccuracyMatrix":
        """Lower-triangular rows (row ``t`` has ``t`` entries) plus optional
        ``{(t, v): acc}`` entries above the diagonal."""
        T = len(rows)
        acc = np.full((T, T), np.nan)
        for t, row in enumerate(rows):
            if len(row) != t + 1:
                raise ValueError(f"row {t + 1} must hold {t + 1} entries")
            acc[t, : t + 1] = row
        for (t, v), value in (upper or {}).items():
            acc[t - 1, v - 1] = value
        return cls(acc, init_row)

    @classmethod
    def from_full(cls, rows, init_row) -> "AccuracyMatrix":
        return cls(np.asarray(rows, dtype=float), init_row)

    @property
    def n_tasks(self) -> int:
        return self.acc.shape[0]

    def get(self, t: int, v: int) -> float:
        value = self.acc[t - 1, v - 1]
        if np.isnan(value):
            raise IncompleteMatrixError(f"missing accuracy for model {t} on task {v}")
        return float(value)

    def to_json(self) -> dict:
        return {"acc": [[None if np.isnan(a) else float(a) for a in row] for row in self.acc],
                "init_row": [float(a) for a in self.init_row]}


def _predictor(model) -> Callable:
    if isinstance(model, nn.ParamSet):
        return lambda x, mask: nn.forward(model, x, mask)
    if callable(model):
        return model
    params = list(getattr(model, "params", model))
    return lambda x, mask: sum(nn.forward(p, x, mask) for p in params) / len(params)


def evaluate_accuracy(model, dataset: TaskDataset, label_mask: np.ndarray | None = None) -> float:
    """Fraction of samples whose masked argmax matches the label.

    ``model`` may be a ParamSet, a list of ParamSets / ModeSet (averaged
    softmax), or a callable ``(x, mask) -> probs``. Ties go to the lowest class.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    probs = _predictor(model)(dataset.x, label_mask)
    if label_mask is not None:
        probs = np.where(label_mask, probs, -np.inf)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.y))


def _check_t(A: AccuracyMatrix, t: int, lo: int) -> None:
    if not lo <= t <= A.n_tasks:
        raise ValueError(f"t must lie in [{lo}, {A.n_tasks}], got {t}")


def average_accuracy(A: AccuracyMatrix, t: int) -> float:
    _check_t(A, t, 1)
    return sum(A.get(t, v) for v in range(1, t + 1)) / t


def backward_transfer(A: AccuracyMatrix, t: int) -> float:
    _check_t(A, t, 2)
    return sum(A.get(t, v) - A.get(v, v) for v in range(1, t)) / (t - 1)


def forward_transfer(A: AccuracyMatrix, t: int) -> float:
    """Accuracy on task ``v`` just before learning it, relative to the untrained model."""
    _check_t(A, t, 2)
    return sum(A.get(v - 1, v) - float(A.init_row[v - 1]) for v in range(2, t + 1)) / (t - 1)


def remembering(A: AccuracyMatrix, t: int) -> float:
    return 1.0 - abs(min(0.0, backward_transfer(A, t)))


def forgetting(A: AccuracyMatrix, T: int | None = None) -> float:
    """Mean over tasks ``v < T`` of peak accuracy (models ``v..T-1``) minus final accuracy."""
    T = A.n_tasks if T is None else T
    _check_t(A, T, 2)
    total = 0.0
    for v in range(1, T):
        peak = max(A.get(t, v) for t in range(v, T))
        total += peak - A.get(T, v)
    return total / (T - 1)


def metric_bundle(A: AccuracyMatrix, strategy: str | None = None) -> dict:
    T = A.n_tasks
    out = {"avg_acc": average_accuracy(A, T)}
    if T >= 2:
        out.update(bwt=backward_transfer(A, T), fwt=forward_transfer(A, T),
                   remembering=remembering(A, T), forgetting=forgetting(A, T))
    else:
        out.update(bwt=float("nan"), fwt=float("nan"), remembering=float("nan"), forgetting=float("nan"))
    if strategy == "multi_task":
        out["raw_transfer"] = {k: out[k] for k in MULTI_TASK_CONVENTION}
        out.update(MULTI_TASK_CONVENTION)
    return out


# ---------------------------------------------------------------- drift

def mean_sq_distance(a: nn.ParamSet | np.ndarray, b: nn.ParamSet | np.ndarray) -> float:
    """Dimension-normalised squared Euclidean distance."""
    va = nn.flatten(a) if isinstance(a, nn.ParamSet) else np.asarray(a, dtype=float)
    vb = nn.flatten(b) if isinstance(b, nn.ParamSet) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise nn.ShapeError("parameter vectors differ in size")
    d = va - vb
    return float(d @ d) / d.size


@dataclass
class DriftTrace:
    """``distances[k][i]``: drift of mode ``i`` over transition ``k`` (task k+1 -> k+2)."""

    distances: np.ndarray
    n_modes: int
    dim: int
    reference: float | None = None

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float).reshape(-1, self.n_modes)
        if (self.distances < 0).any():
            raise ValueError("distances must be non-negative")

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[Sequence[nn.ParamSet]], reference: float | None = None):
        """``snapshots[t-1]`` lists every mode's parameters after task ``t``."""
        n = len(snapshots[0])
        dist = [[mean_sq_distance(cur[i], prev[i]) for i in range(n)]
                for prev, cur in zip(snapshots, snapshots[1:])]
        return cls(np.array(dist).reshape(-1, n), n, nn.dims(snapshots[0][0]), reference)


def average_task_drift(trace: DriftTrace) -> float:
    if trace.distances.shape[0] == 0:
        raise ValueError("no task transitions to average")
    return float(np.mean(trace.distances.sum(axis=1)))


def normalized_drift(trace: DriftTrace, reference: float | None = None) -> float:
    reference = trace.reference if reference is None else reference
    if reference is None:
        raise ValueError("no normalisation reference")
    raw = average_task_drift(trace)
    if reference == 0:
        return 0.0 if raw == 0 else math.inf
    return raw / reference


# ---------------------------------------------------------------- trade-off

@dataclass
class TradeoffReport:
    pi: float
    multi_total: float
    single_total: float
    n_modes: int
    allocation: list[list[int]]
    supported: bool
    pi_single_subtraction: float
    capacity: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"pi": self.pi, "multi_total": self.multi_total, "single_total": self.single_total,
                "n_modes": self.n_modes, "allocation": self.allocation, "supported": self.supported,
                "pi_single_subtraction": self.pi_single_subtraction, "capacity": self.capacity}


def task_allocation(n_modes: int, n_tasks: int, selections: dict[int, Sequence[int]] | None) -> list[list[int]]:
    """Tasks each mode learned: task 1 always, task ``t`` when its selected
    checkpoint moved off epoch 0. Without selections every task counts."""
    alloc = [[1] for _ in range(n_modes)]
    for t in range(2, n_tasks + 1):
        chosen = None if selections is None else selections.get(t)
        for i in range(n_modes):
            if chosen is None or chosen[i] > 0:
                alloc[i].append(t)
    return alloc


def tradeoff_report(multi_snapshots, single_snapshots, mtl_multi: nn.ParamSet, mtl_single: nn.ParamSet,
                    selections: dict[int, Sequence[int]] | None = None,
                    capacity_tolerance: float = 0.10) -> TradeoffReport:
    """Multi-mode versus single-mode summed squared distance to a multi-task reference.

    ``pi = sum_i [ sum_{t in T(i), t >= 2} d_i(t) - sum_{t=2..T} d_single(t) ]``
    with ``d`` the dimension-normalised squared distance to the multi-task
    parameters of the matching architecture. Negative ``pi`` favours the
    multi-mode run.
    """
    n = len(multi_snapshots[0])
    T = len(multi_snapshots)
    if len(single_snapshots) != T or len(single_snapshots[0]) != 1:
        raise ValueError("single-mode run must hold one network per task over the same tasks")
    multi_cap = n * nn.dims(multi_snapshots[0][0])
    single_cap = nn.dims(single_snapshots[0][0])
    if abs(multi_cap - single_cap) > capacity_tolerance * single_cap:
        raise CapacityError(f"capacities {multi_cap} and {single_cap} differ by more than "
                            f"{capacity_tolerance:.0%}")
    alloc = task_allocation(n, T, selections)
    multi_total = 0.0
    for i in range(n):
        for t in alloc[i]:
            if t >= 2:
                multi_total += mean_sq_distance(multi_snapshots[t - 1][i], mtl_multi)
    single_total = 0.0
    for t in range(2, T + 1):
        single_total += mean_sq_distance(single_snapshots[t - 1][0], mtl_single)
    pi = multi_total - n * single_total
    return TradeoffReport(pi, multi_total, single_total, n, alloc, pi < 0, multi_total - single_total,
                          {"multi": multi_cap, "single": single_cap})

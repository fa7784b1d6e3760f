"""Shared training plumbing: seeds, the task feed, the learner base class and
the plain SGD loop used by every single-network strategy."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .task_stream import Task, TaskDataset, TaskStream


class DataAccessViolation(RuntimeError):
    """A sequential learner asked for data from a task other than the current one."""


class StateError(RuntimeError):
    pass


def key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode())


def derive_seed(master: int, *keys) -> int:
    """Counter-based sub-seed: one independent stream per key path."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(key_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


@dataclass
class TrainSettings:
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 64


class TaskFeed:
    """Hands a learner the tasks of a stream one at a time.

    ``task(v)`` for any ``v`` other than the current task raises unless the
    feed was opened with ``history=True`` (multi-task learning only), in which
    case every already-seen task is readable. Future tasks never are.
    """

    def __init__(self, stream: TaskStream, history: bool = False):
        self._tasks = list(stream.tasks)
        self._history = history
        self._current = 0
        self.n_classes = stream.n_classes
        self.input_dim = stream.input_dim

    def advance(self) -> None:
        if self._current >= len(self._tasks):
            raise StateError("stream exhausted")
        self._current += 1

    @property
    def t(self) -> int:
        return self._current

    @property
    def current(self) -> Task:
        if self._current == 0:
            raise StateError("no task has been released yet")
        return self._tasks[self._current - 1]

    def task(self, v: int) -> Task:
        if v == self._current and v >= 1:
            return self.current
        if self._history and 1 <= v < self._current:
            return self._tasks[v - 1]
        raise DataAccessViolation(
            f"task {v} requested while task {self._current} is current")

    def seen(self) -> list[Task]:
        return [self.task(v) for v in range(1, self._current + 1)]


class Learner:
    """Base class for every strategy.

    Subclasses implement :meth:`learn` (called once per released task) and keep
    their networks in ``self.modes`` (a list of ParamSets; one entry for
    single-network strategies). Prediction averages the modes' softmax outputs.
    """

    name = "learner"
    uses_history = False
    # learners sharing a group draw identical sub-seeds (paired comparisons)
    seed_group = None

    def __init__(self, spec: nn.NetworkSpec, settings: TrainSettings, master_seed: int, replicate: int,
                 record_trajectory: bool = False):
        self.spec = spec
        self.settings = settings
        self.master_seed = master_seed
        self.replicate = replicate
        self.record_trajectory = record_trajectory
        self.trajectory: list[tuple[int, int, int, np.ndarray]] = []
        self.modes: list[nn.ParamSet] = []

    def seed(self, *keys) -> int:
        return derive_seed(self.master_seed, self.seed_group or self.name, self.replicate, *keys)

    def learn(self, feed: TaskFeed) -> None:
        raise NotImplementedError

    def predict_proba(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return sum(nn.forward(p, x, mask) for p in self.modes) / len(self.modes)

    @property
    def capacity(self) -> int:
        return sum(nn.dims(p) for p in self.modes)

    def record(self, task: int, epoch: int, mode: int, params: nn.ParamSet) -> None:
        if self.record_trajectory:
            self.trajectory.append((task, epoch, mode, nn.flatten(params)))


@dataclass
class Pool:
    """Training arrays with a per-sample label mask (rows of ``[n, K]``)."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_datasets(cls, datasets: Sequence[TaskDataset]) -> "Pool":
        x = np.concatenate([d.x for d in datasets])
        y = np.concatenate([d.y for d in datasets])
        mask = np.concatenate([np.broadcast_to(d.mask, (len(d), d.n_classes)) for d in datasets])
        return cls(x, y, mask)

    def __len__(self) -> int:
        return len(self.y)

    def batch_indices(self, batch_size: int, seed: int) -> list[np.ndarray]:
        order = np.random.default_rng(seed).permutation(len(self))
        return [order[i:i + batch_size] for i in range(0, len(self), batch_size)]


StepFn = Callable[[nn.ParamSet, nn.ParamSet, float], nn.ParamSet]


def fit(params: nn.ParamSet, pool: Pool, settings: TrainSettings, seed_of_epoch: Callable[[int], int],
        step: StepFn | None = None,
        on_epoch: Callable[[int, nn.ParamSet], None] | None = None) -> nn.ParamSet:
    """Mini-batch gradient descent on masked cross-entropy.

    ``step(params, grads, lr)`` replaces the plain update (the EWC learner
    passes its penalised step).
    """
    step = step or nn.optimizer_step
    for epoch in range(1, settings.epochs + 1):
        for idx in pool.batch_indices(settings.batch_size, seed_of_epoch(epoch)):
            _, grads = nn.backward(params, pool.x[idx], pool.y[idx], pool.mask[idx])
            params = step(params, grads, settings.lr)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params

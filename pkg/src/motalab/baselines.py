"""Reference strategies and the sequential run loop that scores all of them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .metrics import AccuracyMatrix, CapacityError, evaluate_accuracy
from .mota_core import ModeSet, MotaLearner, estimate_fisher, initialize_task1, penalized_step
from .task_stream import TaskStream
from .training import Learner, Pool, TaskFeed, TrainSettings, derive_seed, fit

STRATEGIES = ("single_task", "naive_sequential", "multi_task", "ewc", "ensemble_distmax",
              "ensemble_seeds", "mota")


@dataclass
class StrategyRun:
    strategy: str
    snapshots: list[list[nn.ParamSet]]
    accuracy: AccuracyMatrix
    capacity: int
    replay_buffer: int = 0
    selections: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.snapshots)


class SingleTaskLearner(Learner):
    name = "single_task"
    seed_group = "single_network"

    def __init__(self, spec, settings, master_seed, replicate, init_params, record_trajectory=False):
        super().__init__(spec, settings, master_seed, replicate, record_trajectory)
        self.init = init_params
        self.modes = [init_params.copy()]

    def _fit(self, start, pool, t, step=None):
        self.record(t, 0, 0, start)
        return fit(start, pool, self.settings, lambda e: self.seed(t, e), step,
                   lambda e, p: self.record(t, e, 0, p))

    def learn(self, feed: TaskFeed) -> None:
        task = feed.current
        self.modes = [self._fit(self.init.copy(), Pool.from_datasets([task.train]), task.index)]


class NaiveSequentialLearner(SingleTaskLearner):
    name = "naive_sequential"

    def learn(self, feed: TaskFeed) -> None:
        task = feed.current
        self.modes = [self._fit(self.modes[0], Pool.from_datasets([task.train]), task.index)]


class MultiTaskLearner(SingleTaskLearner):
    """Retrains from the initialisation on every task seen so far."""

    name = "multi_task"
    uses_history = True

    def learn(self, feed: TaskFeed) -> None:
        pool = Pool.from_datasets([task.train for task in feed.seen()])
        self.modes = [self._fit(self.init.copy(), pool, feed.t)]


class EwcLearner(SingleTaskLearner):
    name = "ewc"

    def __init__(self, spec, settings, master_seed, replicate, init_params, lam=1000.0, fisher_samples=200,
                 record_trajectory=False):
        super().__init__(spec, settings, master_seed, replicate, init_params, record_trajectory)
        self.lam = lam
        self.fisher_samples = fisher_samples
        self.anchor = None
        self.fisher = None

    def learn(self, feed: TaskFeed) -> None:
        task = feed.current
        step = None
        if self.anchor is not None and self.lam:
            anchor, fisher, lam = self.anchor, self.fisher, self.lam
            step = lambda p, g, lr: penalized_step(p, g, lr, anchor, fisher, lam)  # noqa: E731
        params = self._fit(self.modes[0], Pool.from_datasets([task.train]), task.index, step)
        self.modes = [params]
        self.anchor = params.copy()
        self.fisher = estimate_fisher(params, task.train, self.fisher_samples)


class EnsembleLearner(Learner):
    """Independently trained modes with averaged-softmax inference.

    ``distmax`` starts from the diversity-maximising task-1 procedure; ``seeds``
    initialises mode ``i`` from seed ``i`` (1, 2, ...) and trains every mode on
    every task with its own loss.
    """

    def __init__(self, spec, settings, master_seed, replicate, variant, n_modes=2, beta_max=100.0,
                 init_params=None, zero_readout=False, record_trajectory=False):
        if variant not in ("distmax", "seeds"):
            raise ValueError(f"unknown ensemble variant {variant!r}")
        self.name = f"ensemble_{variant}"
        super().__init__(spec, settings, master_seed, replicate, record_trajectory)
        self.variant = variant
        self.beta_max = beta_max
        if variant == "distmax":
            self.modes = [init_params.copy() for _ in range(n_modes)]
        else:
            self.modes = [nn.init_params(spec, np.random.default_rng(
                np.random.SeedSequence(i, spawn_key=(replicate,))), zero_readout)
                for i in range(1, n_modes + 1)]

    def learn(self, feed: TaskFeed) -> None:
        task = feed.current
        t = task.index
        for i, p in enumerate(self.modes):
            self.record(t, 0, i, p)
        if t == 1 and self.variant == "distmax" and len(self.modes) > 1:
            ms = initialize_task1(task.train, ModeSet.from_init(self.modes[0], len(self.modes), self.beta_max),
                                  self.settings, self.seed(t),
                                  lambda e, ps: [self.record(t, e, i, p) for i, p in enumerate(ps)])
            self.modes = ms.params
            return
        pool = Pool.from_datasets([task.train])
        group = SingleTaskLearner.seed_group

        def order(e, i):
            # one mode is plain fine-tuning; share the single-network batch order
            if len(self.modes) == 1:
                return derive_seed(self.master_seed, group, self.replicate, t, e)
            return self.seed(t, i, e)

        self.modes = [fit(p, pool, self.settings, lambda e, i=i: order(e, i),
                          on_epoch=lambda e, q, i=i: self.record(t, e, i, q))
                      for i, p in enumerate(self.modes)]


def run_sequential(learner: Learner, stream: TaskStream, split: str = "test",
                   masked: bool = True) -> StrategyRun:
    """Release tasks one by one and fill the accuracy matrix.

    Row 0 is the untrained learner; after task ``t`` every task of the stream is
    scored (future tasks are needed for forward transfer). Evaluation uses
    each task's label mask unless ``masked`` is off (class-incremental scoring).
    """
    feed = TaskFeed(stream, history=learner.uses_history)
    T = stream.n_tasks
    evals = [task.split_named(split) for task in stream.tasks]

    def row():
        return [evaluate_accuracy(learner.predict_proba, ds, ds.mask if masked else None) for ds in evals]

    init_row = row()
    full = []
    snapshots = []
    capacities = []
    for _ in range(T):
        feed.advance()
        learner.learn(feed)
        full.append(row())
        snapshots.append([p.copy() for p in learner.modes])
        capacities.append(learner.capacity)
    if len(set(capacities)) != 1:
        raise CapacityError(f"{learner.name} changed capacity across tasks: {capacities}")
    acc = AccuracyMatrix.from_full(full, init_row)
    return StrategyRun(learner.name, snapshots, acc, capacities[0],
                       selections={t: s.epochs for t, s in getattr(learner, "selections", {}).items()},
                       trajectory=learner.trajectory)


def make_learner(strategy: str, *, big: nn.NetworkSpec, small: nn.NetworkSpec, settings: TrainSettings,
                 master_seed: int, replicate: int, init_big: nn.ParamSet, init_small: nn.ParamSet,
                 n_modes: int = 2, beta_max: float = 100.0, beta_min: float = 1000.0, lam: float = 1000.0,
                 drift_weight: float = 0.1, enumeration_cap: int = 4096, fisher_samples: int = 200,
                 selection_distance: str = "fisher", joint_fisher: bool = True, zero_readout: bool = False,
                 keep_checkpoints: bool = False, record_trajectory: bool = False) -> Learner:
    common = dict(settings=settings, master_seed=master_seed, replicate=replicate,
                  record_trajectory=record_trajectory)
    if strategy == "single_task":
        return SingleTaskLearner(big, init_params=init_big, **common)
    if strategy == "naive_sequential":
        return NaiveSequentialLearner(big, init_params=init_big, **common)
    if strategy == "multi_task":
        return MultiTaskLearner(big, init_params=init_big, **common)
    if strategy == "ewc":
        return EwcLearner(big, init_params=init_big, lam=lam, fisher_samples=fisher_samples, **common)
    if strategy in ("ensemble_distmax", "ensemble_seeds"):
        return EnsembleLearner(small, variant=strategy.split("_")[1], n_modes=n_modes, beta_max=beta_max,
                               init_params=init_small, zero_readout=zero_readout, **common)
    if strategy == "mota":
        return MotaLearner(small, n_modes=n_modes, beta_max=beta_max, beta_min=beta_min,
                           drift_weight=drift_weight, enumeration_cap=enumeration_cap,
                           fisher_samples=fisher_samples, init_params=init_small,
                           selection_distance=selection_distance, joint_fisher=joint_fisher,
                           keep_checkpoints=keep_checkpoints, **common)
    raise ValueError(f"unknown strategy {strategy!r}")


def _runner(strategy):
    def train(stream: TaskStream, **kwargs) -> StrategyRun:
        return run_sequential(make_learner(strategy, **kwargs), stream)
    train.__name__ = f"train_{strategy}"
    return train


train_single_task = _runner("single_task")
train_naive_sequential = _runner("naive_sequential")
train_multi_task = _runner("multi_task")
train_ewc = _runner("ewc")
train_mota = _runner("mota")


def train_ensemble(stream: TaskStream, variant: str, **kwargs) -> StrategyRun:
    if variant not in ("distmax", "seeds"):
        raise ValueError(f"unknown ensemble variant {variant!r}")
    return run_sequential(make_learner(f"ensemble_{variant}", **kwargs), stream)


def check_capacity_fairness(mota_capacity: int, baseline_capacity: int, tolerance: float = 0.10) -> None:
    """Multi-mode capacity may not exceed the single network, nor fall short by more than ``tolerance``."""
    if mota_capacity > baseline_capacity:
        raise CapacityError(f"multi-mode capacity {mota_capacity} exceeds baseline {baseline_capacity}")
    if mota_capacity < (1 - tolerance) * baseline_capacity:
        raise CapacityError(f"multi-mode capacity {mota_capacity} is more than {tolerance:.0%} below "
                            f"baseline {baseline_capacity}")


def seed_for_init(master_seed: int, replicate: int, which: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, "init", which, replicate))

"""Synthetic task streams for the three shift regimes.

* ``task_il``: every task brings fresh Gaussian clusters with new global labels.
* ``instance_il``: a fixed label set; each task redraws the cluster of every
  class (sub-population shift).
* ``domain_il``: fixed labels and clusters; task ``t`` rotates inputs by
  ``t * pi/7`` in a random 2-plane and scales them by ``1 + 0.1 t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHIFT_KINDS = ("task_il", "instance_il", "domain_il")
SPLIT_NAMES = ("train", "val", "test")


class StreamConfigError(ValueError):
    pass


@dataclass
class TaskDataset:
    task_index: int
    x: np.ndarray
    y: np.ndarray
    label_set: tuple[int, ...]
    split: str
    n_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and not np.isin(self.y, self.label_set).all():
            raise ValueError(f"labels outside the label set {self.label_set}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def mask(self) -> np.ndarray:
        """Boolean ``[K]`` vector selecting this task's labels."""
        m = np.zeros(self.n_classes, dtype=bool)
        m[list(self.label_set)] = True
        return m

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.task_index, self.x[idx], self.y[idx], self.label_set, self.split, self.n_classes)


@dataclass
class Task:
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset

    @property
    def index(self) -> int:
        return self.train.task_index

    @property
    def label_set(self) -> tuple[int, ...]:
        return self.train.label_set

    def split_named(self, name: str) -> TaskDataset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass
class TaskStream:
    tasks: list[Task]
    shift_kind: str
    n_classes: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise StreamConfigError("a stream needs at least one task")
        if self.shift_kind == "task_il":
            seen: set[int] = set()
            for t in self.tasks:
                if seen & set(t.label_set):
                    raise StreamConfigError("task-IL label sets must be disjoint")
                seen |= set(t.label_set)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train.x.shape[1]

    def truncated(self, n_tasks: int) -> "TaskStream":
        return TaskStream(self.tasks[:n_tasks], self.shift_kind, self.n_classes, self.seed, dict(self.meta))


def split(x: np.ndarray, y: np.ndarray, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Stratified shuffle split; per-class sizes use largest-remainder rounding.

    Returns three index arrays into ``x``/``y``.
    """
    fractions = np.asarray(fractions, dtype=float)
    if len(fractions) != 3 or abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise StreamConfigError("fractions must be three non-negative numbers summing to 1")
    y = np.asarray(y)
    if len(y) < 10:
        raise StreamConfigError("need at least 10 samples to split")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 3:
            raise StreamConfigError(f"class {cls} has fewer than 3 samples")
        idx = rng.permutation(idx)
        sizes = _largest_remainder(len(idx), fractions)
        start = 0
        for k, size in enumerate(sizes):
            parts[k].extend(idx[start:start + size].tolist())
            start += size
    return tuple(np.sort(np.asarray(p, dtype=int)) for p in parts)


def _largest_remainder(n: int, fractions: np.ndarray) -> list[int]:
    exact = fractions * n
    sizes = np.floor(exact).astype(int)
    remainder = exact - sizes
    # ties go to the earlier split
    for k in np.argsort(-remainder, kind="stable")[: n - sizes.sum()]:
        sizes[k] += 1
    return sizes.tolist()


def batches(dataset: TaskDataset, batch_size: int, epoch_seed) -> list[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    return [(dataset.x[order[i:i + batch_size]], dataset.y[order[i:i + batch_size]])
            for i in range(0, len(dataset), batch_size)]


def _random_plane(rng: np.random.Generator, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    return q


def _rotation(plane: np.ndarray, angle: float) -> np.ndarray:
    d = plane.shape[0]
    u, v = plane[:, 0], plane[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (np.eye(d) + (c - 1) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def make_stream(kind: str, n_tasks: int, classes_per_task: int, samples_per_class: int, seed: int,
                input_dim: int = 16, cluster_std: float = 1.0, mean_range: float = 1.0,
                fractions=(0.7, 0.1, 0.2)) -> TaskStream:
    if kind not in SHIFT_KINDS:
        raise StreamConfigError(f"unknown stream kind {kind!r}; expected one of {SHIFT_KINDS}")
    if n_tasks < 2:
        raise StreamConfigError("a stream needs T >= 2")
    if classes_per_task < 2:
        raise StreamConfigError("classes_per_task must be >= 2")
    if samples_per_class < 30:
        raise StreamConfigError("samples_per_class must be >= 30")
    if input_dim < 2 or cluster_std <= 0 or mean_range <= 0:
        raise StreamConfigError("input_dim >= 2, cluster_std > 0 and mean_range > 0 required")

    rng = np.random.default_rng(seed)
    n_classes = classes_per_task * n_tasks if kind == "task_il" else classes_per_task

    def cluster_means(k):
        return rng.uniform(-mean_range, mean_range, size=(k, input_dim))

    def draw(means, labels):
        xs = [m + cluster_std * rng.standard_normal((samples_per_class, input_dim)) for m in means]
        ys = [np.full(samples_per_class, c) for c in labels]
        return np.concatenate(xs), np.concatenate(ys)

    shared_means = cluster_means(n_classes) if kind != "task_il" else None
    plane = _random_plane(rng, input_dim) if kind == "domain_il" else None

    tasks = []
    for t in range(1, n_tasks + 1):
        if kind == "task_il":
            labels = list(range((t - 1) * classes_per_task, t * classes_per_task))
            x, y = draw(cluster_means(classes_per_task), labels)
        elif kind == "instance_il":
            labels = list(range(n_classes))
            x, y = draw(cluster_means(n_classes), labels)
        else:
            labels = list(range(n_classes))
            x, y = draw(shared_means, labels)
            x = (1.0 + 0.1 * t) * x @ _rotation(plane, t * np.pi / 7).T
        split_seed = int(rng.integers(2**32))
        parts = split(x, y, fractions, seed=split_seed)
        label_set = tuple(labels)
        datasets = [TaskDataset(t, x[idx], y[idx], label_set, name, n_classes)
                    for idx, name in zip(parts, SPLIT_NAMES)]
        tasks.append(Task(*datasets))
    meta = dict(kind=kind, n_tasks=n_tasks, classes_per_task=classes_per_task,
                samples_per_class=samples_per_class, input_dim=input_dim,
                cluster_std=cluster_std, mean_range=mean_range)
    return TaskStream(tasks, kind, n_classes, seed, meta)


# ---------------------------------------------------------------- CSV export

def _fmt(v: float) -> str:
    return repr(float(v))


def export_stream(stream: TaskStream, directory: str | Path) -> list[Path]:
    """One CSV per task split: ``task_<t>_<split>.csv`` with ``x_0..x_{d-1},y,task_index``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = stream.input_dim
    header = [f"x_{j}" for j in range(d)] + ["y", "task_index"]
    written = []
    for task in stream.tasks:
        for name in SPLIT_NAMES:
            ds = task.split_named(name)
            path = directory / f"task_{task.index}_{name}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for xi, yi in zip(ds.x, ds.y):
                    w.writerow([_fmt(v) for v in xi] + [int(yi), task.index])
            written.append(path)
    manifest = directory / "stream.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for key, value in stream.meta.items():
            w.writerow([key, value])
        w.writerow(["n_classes", stream.n_classes])
        w.writerow(["seed", stream.seed])
        for task in stream.tasks:
            w.writerow([f"labels_{task.index}", " ".join(map(str, task.label_set))])
    written.append(manifest)
    return written


def import_stream(directory: str | Path) -> TaskStream:
    directory = Path(directory)
    with (directory / "stream.csv").open() as fh:
        rows = list(csv.reader(fh))[1:]
    meta = {k: v for k, v in rows}
    n_classes = int(meta.pop("n_classes"))
    seed = int(meta.pop("seed"))
    n_tasks = int(meta["n_tasks"])
    tasks = []
    for t in range(1, n_tasks + 1):
        label_set = tuple(int(v) for v in meta.pop(f"labels_{t}").split())
        parts = []
        for name in SPLIT_NAMES:
            arr = np.loadtxt(directory / f"task_{t}_{name}.csv", delimiter=",", skiprows=1, ndmin=2)
            parts.append(TaskDataset(t, arr[:, :-2], arr[:, -2].astype(int), label_set, name, n_classes))
        tasks.append(Task(*parts))
    return TaskStream(tasks, meta["kind"], n_classes, seed, meta)

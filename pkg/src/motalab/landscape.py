"""Loss-landscape data along a training trajectory.

Flat parameter snapshots are collected per epoch, the top two principal
directions of the trajectory span a plane through the final parameters, and
every task's loss is sampled on a grid in that plane. Output is plain CSV plus
the directions in the binary parameter format; drawing is left to the reader.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn_core as nn
from .task_stream import TaskDataset

log = logging.getLogger(__name__)

PCA_TOL = 1e-10


class DegenerateTrajectoryError(ValueError):
    """Fewer independent directions in the snapshots than requested."""


@dataclass
class TrajectorySnapshotStore:
    """Flat parameter vectors in capture order, tagged ``(task, epoch, mode)``."""

    strategy: str
    tags: list[tuple[int, int, int]] = field(default_factory=list)
    vectors: list[np.ndarray] = field(default_factory=list)

    def add(self, task: int, epoch: int, mode: int, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=float).ravel()
        if self.vectors and vector.shape != self.vectors[0].shape:
            raise nn.ShapeError(f"snapshot of size {vector.size} in a store of size {self.vectors[0].size}")
        self.tags.append((int(task), int(epoch), int(mode)))
        self.vectors.append(vector.copy())

    @classmethod
    def from_trajectory(cls, strategy: str, trajectory: Iterable) -> "TrajectorySnapshotStore":
        store = cls(strategy)
        for task, epoch, mode, vec in trajectory:
            store.add(task, epoch, mode, vec)
        return store

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def modes(self) -> list[int]:
        return sorted({m for _, _, m in self.tags})

    def for_mode(self, mode: int) -> "TrajectorySnapshotStore":
        out = TrajectorySnapshotStore(self.strategy)
        for tag, vec in zip(self.tags, self.vectors):
            if tag[2] == mode:
                out.add(*tag, vec)
        return out

    def matrix(self) -> np.ndarray:
        if not self.vectors:
            raise DegenerateTrajectoryError("empty snapshot store")
        return np.stack(self.vectors)

    def final(self, mode: int | None = None) -> np.ndarray:
        """Last captured vector (of ``mode`` when given)."""
        for tag, vec in zip(reversed(self.tags), reversed(self.vectors)):
            if mode is None or tag[2] == mode:
                return vec
        raise KeyError(f"no snapshot for mode {mode}")


@dataclass
class PcaBasis:
    directions: np.ndarray      # [k, D], orthonormal rows
    variances: np.ndarray       # eigenvalues of the centred covariance
    total_variance: float
    mean: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.directions[0]

    @property
    def eta(self) -> np.ndarray:
        return self.directions[1]

    @property
    def explained(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.variances)
        return self.variances / self.total_variance


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] > 0 else -v


def _power_iteration(gram: np.ndarray, found: list[np.ndarray], tol: float, max_iter: int):
    n = gram.shape[0]
    # deterministic start, kept off the already-found directions
    u = np.linspace(1.0, 2.0, n)
    for f in found:
        u -= (f @ u) * f
    norm = np.linalg.norm(u)
    if norm == 0:
        u = np.eye(n)[len(found) % n]
        norm = 1.0
    u /= norm
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ u
        for f in found:
            w -= (f @ w) * f
        lam_new = float(u @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return u, 0.0
        w /= norm
        if min(np.linalg.norm(w - u), np.linalg.norm(w + u)) < tol:
            return w, lam_new
        u, lam = w, lam_new
    log.warning("power iteration stopped after %d steps without reaching tol %.1e", max_iter, tol)
    return u, lam


def principal_directions(snapshots, k: int = 2, tol: float = PCA_TOL, max_iter: int = 200_000) -> PcaBasis:
    """Top-``k`` eigendirections of the mean-centred snapshot covariance.

    Power iteration with deflation on the ``n x n`` Gram matrix of the centred
    snapshots (same non-zero spectrum as the ``D x D`` covariance, much
    smaller when ``n << D``). Each direction's largest-magnitude entry is
    positive.
    """
    X = snapshots.matrix() if isinstance(snapshots, TrajectorySnapshotStore) else np.asarray(snapshots, float)
    if X.ndim != 2 or len(X) < k + 1:
        raise DegenerateTrajectoryError(f"need at least {k + 1} snapshots, got {len(X)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    n = len(Xc)
    gram = Xc @ Xc.T / n
    total = float(np.trace(gram))
    scale = max(total, np.finfo(float).tiny)
    found_u, dirs, lams = [], [], []
    for _ in range(k):
        u, lam = _power_iteration(gram, found_u, tol, max_iter)
        if lam <= 1e-12 * scale:
            raise DegenerateTrajectoryError(f"snapshots span fewer than {k} directions")
        found_u.append(u)
        d = Xc.T @ u
        # re-orthogonalise in parameter space against round-off
        for prev in dirs:
            d -= (prev @ d) * prev
        dirs.append(_fix_sign(d / np.linalg.norm(d)))
        lams.append(lam)
    return PcaBasis(np.stack(dirs), np.array(lams), total, mean)


def pca_top2(snapshots, tol: float = PCA_TOL) -> PcaBasis:
    return principal_directions(snapshots, 2, tol)


def project(vectors, origin: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Coordinates of ``vectors`` in the plane through ``origin``."""
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    return (V - origin) @ basis.directions[:2].T


# ---------------------------------------------------------------- grids

@dataclass
class LossGrid:
    """``losses[i, j]`` is the loss at ``theta* + alphas[i] delta + alphas[j] eta``."""

    task: int
    delta: np.ndarray
    eta: np.ndarray
    alphas: np.ndarray
    losses: np.ndarray
    bounds: tuple[float, float] | None = None

    @property
    def steps(self) -> int:
        return len(self.alphas)

    @property
    def center(self) -> float:
        c = self.steps // 2
        return float(self.losses[c, c])

    def argmin(self) -> tuple[int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmin(self.losses), self.losses.shape))


def dataset_loss(params: nn.ParamSet, dataset: TaskDataset, mask: np.ndarray | None = None) -> float:
    """Mean masked cross-entropy; ``inf`` when the forward pass overflows."""
    mask = dataset.mask if mask is None else mask
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            probs = nn.forward(params, dataset.x, mask)
        except nn.NumericError:
            return float("inf")
        value = float(np.mean(nn.cross_entropy(probs, dataset.y)))
    return value if np.isfinite(value) else float("inf")


def loss_grid(theta_star, delta: np.ndarray, eta: np.ndarray, dataset: TaskDataset, half_range: float,
              steps: int = 41, like: nn.ParamSet | None = None) -> LossGrid:
    """Sample the loss on a ``steps x steps`` grid in the plane through ``theta_star``."""
    if steps < 1 or steps % 2 == 0:
        raise ValueError("steps must be odd so the centre is sampled")
    if not half_range > 0:
        raise ValueError("half_range must be positive")
    like = theta_star if isinstance(theta_star, nn.ParamSet) else like
    if like is None:
        raise ValueError("a ParamSet template is needed for flat parameters")
    center = nn.flatten(theta_star) if isinstance(theta_star, nn.ParamSet) else np.asarray(theta_star, float)
    delta = np.asarray(delta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    alphas = np.linspace(-half_range, half_range, steps)
    alphas[steps // 2] = 0.0
    losses = np.empty((steps, steps))
    for i, a in enumerate(alphas):
        for j, b in enumerate(alphas):
            losses[i, j] = dataset_loss(nn.unflatten(center + a * delta + b * eta, like), dataset)
    return LossGrid(dataset.task_index, delta, eta, alphas, losses)


def normalize_grids(grids: Sequence[LossGrid]) -> list[LossGrid]:
    """Map all grids jointly onto [0, 1]; ``inf`` entries become 1."""
    if not grids:
        raise ValueError("no grids to normalise")
    finite = np.concatenate([g.losses[np.isfinite(g.losses)] for g in grids])
    out = []
    if finite.size == 0 or finite.min() == finite.max():
        log.warning("all grid values are equal; normalised grids are zero")
        for g in grids:
            values = np.where(np.isfinite(g.losses), 0.0, 1.0) if finite.size else np.ones_like(g.losses)
            out.append(LossGrid(g.task, g.delta, g.eta, g.alphas, values, (0.0, 0.0)))
        return out
    lo, hi = float(finite.min()), float(finite.max())
    for g in grids:
        values = np.where(np.isfinite(g.losses), (g.losses - lo) / (hi - lo), 1.0)
        out.append(LossGrid(g.task, g.delta, g.eta, g.alphas, np.clip(values, 0.0, 1.0), (lo, hi)))
    return out


def basin_shifted(grids: Sequence[LossGrid]) -> bool:
    """True when every consecutive pair of task grids has its minimum at a
    different grid point."""
    if len(grids) < 2:
        raise ValueError("need at least two task grids")
    return all(a.argmin() != b.argmin() for a, b in zip(grids, grids[1:]))


# ---------------------------------------------------------------- views / export

@dataclass
class LandscapeView:
    """One basis, one origin: the grids and the projected trajectory."""

    name: str
    basis: PcaBasis
    origin: np.ndarray
    grids: list[LossGrid]
    trajectory: list[tuple[int, int, float, float]]


def build_view(name: str, store: TrajectorySnapshotStore, basis: PcaBasis, origin: np.ndarray,
               datasets: Sequence[TaskDataset], like: nn.ParamSet, steps: int = 41,
               half_range: float | None = None) -> LandscapeView:
    coords = project(store.matrix(), origin, basis)
    if half_range is None:
        half_range = 1.5 * float(np.max(np.abs(coords)))
        if half_range == 0:
            half_range = 1.0
    grids = [loss_grid(origin, basis.delta, basis.eta, ds, half_range, steps, like) for ds in datasets]
    traj = [(t, e, float(c[0]), float(c[1])) for (t, e, _), c in zip(store.tags, coords)]
    return LandscapeView(name, basis, origin, grids, traj)


def landscape_views(store: TrajectorySnapshotStore, datasets: Sequence[TaskDataset], like: nn.ParamSet,
                    steps: int = 41, half_range: float | None = None) -> list[LandscapeView]:
    """Single-network strategies get one view. Multi-mode runs get a view per
    mode in its own basis plus a view per mode in a basis shared by all modes."""
    modes = store.modes
    if len(modes) == 1:
        basis = pca_top2(store)
        return [build_view("", store, basis, store.final(), datasets, like, steps, half_range)]
    views = []
    shared = pca_top2(store)
    for m in modes:
        sub = store.for_mode(m)
        views.append(build_view(f"mode_{m}", sub, pca_top2(sub), sub.final(), datasets, like, steps, half_range))
    for m in modes:
        sub = store.for_mode(m)
        views.append(build_view(f"shared/mode_{m}", sub, shared, sub.final(), datasets, like, steps,
                                half_range))
    return views


def export_views(root: str | Path, views: Sequence[LandscapeView], like: nn.ParamSet) -> list[Path]:
    """``<root>/[<view>/]task_<t>.csv``, ``trajectory.csv`` and
    ``directions.bin``. All grids passed in are normalised jointly."""
    root = Path(root)
    flat = [g for v in views for g in v.grids]
    normed = iter(normalize_grids(flat))
    written = []
    for view in views:
        d = root / view.name if view.name else root
        d.mkdir(parents=True, exist_ok=True)
        for _ in view.grids:
            g = next(normed)
            path = d / f"task_{g.task}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["alpha_delta", "alpha_eta", "loss_norm"])
                for i, a in enumerate(g.alphas):
                    for j, b in enumerate(g.alphas):
                        w.writerow([repr(float(a)), repr(float(b)), repr(float(g.losses[i, j]))])
            written.append(path)
        path = d / "trajectory.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "epoch", "proj_delta", "proj_eta"])
            for t, e, a, b in view.trajectory:
                w.writerow([t, e, repr(a), repr(b)])
        written.append(path)
        path = d / "directions.bin"
        path.write_bytes(nn.vectors_to_bytes([view.basis.delta, view.basis.eta], like))
        written.append(path)
    return written


def read_directions(path: str | Path, activation: str = "relu") -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    first = nn.params_from_bytes(data[: len(data) // 2], activation)
    second = nn.params_from_bytes(data[len(data) // 2:], activation)
    return nn.flatten(first), nn.flatten(second)

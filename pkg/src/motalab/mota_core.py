"""Multi-mode training: diversity-maximising initialisation, joint-inference
adaptation with an EWC drift penalty, and checkpoint backtracking."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .task_stream import TaskDataset
from .training import Learner, Pool, StateError, TaskFeed, TrainSettings, derive_seed

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


class InvariantViolation(RuntimeError):
    pass


@dataclass
class ModeState:
    params: nn.ParamSet
    anchor: nn.ParamSet
    fisher: nn.ParamSet
    index: int
    checkpoints: list[tuple[int, nn.ParamSet]] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: nn.ParamSet, index: int) -> "ModeState":
        return cls(params.copy(), params.copy(), params.zeros_like(), index, [(0, params.copy())])


@dataclass
class ModeSet:
    modes: list[ModeState]
    beta_max: float = 100.0
    beta_min: float = 1000.0

    def __post_init__(self):
        if not self.modes:
            raise ValueError("a ModeSet needs at least one mode")
        shapes = self.modes[0].params.shapes
        if any(m.params.shapes != shapes for m in self.modes):
            raise nn.ShapeError("all modes must share one architecture")

    @classmethod
    def from_init(cls, init: nn.ParamSet, n: int, beta_max: float = 100.0, beta_min: float = 1000.0) -> "ModeSet":
        return cls([ModeState.fresh(init, i) for i in range(n)], beta_max, beta_min)

    @property
    def n(self) -> int:
        return len(self.modes)

    @property
    def params(self) -> list[nn.ParamSet]:
        return [m.params for m in self.modes]

    @property
    def capacity(self) -> int:
        return self.n * nn.dims(self.modes[0].params)


@dataclass
class CheckpointSelection:
    epochs: list[int]
    objective: float
    drift_weight: float
    exhaustive: bool = True


def _param_list(modes) -> list[nn.ParamSet]:
    if isinstance(modes, ModeSet):
        return modes.params
    return list(modes)


# ---------------------------------------------------------------- initialisation

def sample_simplex_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the probability simplex (normalised exponentials)."""
    if n <= 0:
        raise ValueError("need at least one weight")
    if n == 1:
        return np.ones(1)
    e = rng.exponential(size=n)
    return e / e.sum()


def interpolate_modes(modes, alpha) -> nn.ParamSet:
    params = _param_list(modes)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(params),):
        raise ValueError(f"expected {len(params)} weights, got {alpha.shape}")
    out = nn.scale(alpha[0], params[0])
    for a, p in zip(alpha[1:], params[1:]):
        out = nn.axpy(a, p, out)
    return out


def _cos_denominator(uu: float, vv: float) -> float:
    # sqrt of the product (not a product of norms) so a vector's cosine with
    # itself is exactly 1; the floor only matters for all-zero layers
    return max(float(np.sqrt(uu * vv)), NORM_EPS)


def _layer_cos(u: np.ndarray, v: np.ndarray) -> float:
    return float(u @ v / _cos_denominator(u @ u, v @ v))


def pairwise_cosine(modes) -> float:
    """Mean per-layer cosine similarity over all mode pairs.

    Each layer is its weights and bias taken as one vector. The normaliser is
    ``1 / ((M/2)(N^2 - N))``, i.e. one over the number of (layer, pair) terms.
    """
    params = _param_list(modes)
    n = len(params)
    if n < 2:
        raise ValueError("pairwise cosine needs at least two modes")
    m = params[0].n_layers
    total = 0.0
    for layer in range(m):
        vecs = [p.layer_vector(layer) for p in params]
        for i, j in itertools.combinations(range(n), 2):
            total += _layer_cos(vecs[i], vecs[j])
    return total / (0.5 * m * (n * n - n))


def pairwise_cosine_grad(modes) -> list[nn.ParamSet]:
    """Gradient of :func:`pairwise_cosine` with respect to every mode."""
    params = _param_list(modes)
    n = len(params)
    m = params[0].n_layers
    norm = 1.0 / (0.5 * m * (n * n - n))
    grads = [[None] * m for _ in range(n)]
    for layer in range(m):
        vecs = [p.layer_vector(layer) for p in params]
        lens = [np.linalg.norm(v) for v in vecs]
        acc = [np.zeros_like(vecs[0]) for _ in range(n)]
        for i, j in itertools.combinations(range(n), 2):
            d = _cos_denominator(lens[i] ** 2, lens[j] ** 2)
            dot = vecs[i] @ vecs[j]
            # d/du [u.v / (|u||v|)]
            gi = vecs[j] / d
            gj = vecs[i] / d
            if lens[i] > 0:
                gi = gi - dot / d**2 * lens[j] * vecs[i] / lens[i]
            if lens[j] > 0:
                gj = gj - dot / d**2 * lens[i] * vecs[j] / lens[j]
            acc[i] += gi
            acc[j] += gj
        for i in range(n):
            grads[i][layer] = norm * acc[i]
    out = []
    for i, p in enumerate(params):
        flat = np.concatenate(grads[i])
        out.append(nn.unflatten(flat, p))
    return out


def _retract(before: nn.ParamSet, after: nn.ParamSet) -> nn.ParamSet:
    """Rescale every layer of ``after`` to the norm it had in ``before``.

    The cosine term is scale-invariant, so its gradient is orthogonal to each
    layer and its gradient flow keeps layer norms fixed; a plain explicit step
    inflates them instead.
    """
    weights, biases = [], []
    for k in range(after.n_layers):
        old = np.linalg.norm(before.layer_vector(k))
        new = np.linalg.norm(after.layer_vector(k))
        c = old / new if new > 0 else 1.0
        weights.append(after.weights[k] * c)
        biases.append(after.biases[k] * c)
    return nn.ParamSet(weights, biases, after.activation)


def initialize_task1(train: TaskDataset, modes: ModeSet, settings: TrainSettings, seed: int,
                     on_epoch=None) -> ModeSet:
    """Train all modes on task 1 through random convex combinations of them,
    with a ``beta_max``-weighted cosine-similarity penalty pushing them apart.

    Mode ``i`` receives ``alpha_i`` times the loss gradient at the interpolated
    parameter plus its own gradient of the similarity term.
    """
    if train.task_index != 1:
        raise StateError(f"initialisation runs on task 1, got task {train.task_index}")
    params = [m.params.copy() for m in modes.modes]
    n = len(params)
    pool = Pool.from_datasets([train])
    alpha_rng = np.random.default_rng(derive_seed(seed, "alpha"))
    for epoch in range(1, settings.epochs + 1):
        for idx in pool.batch_indices(settings.batch_size, derive_seed(seed, "epoch", epoch)):
            alpha = sample_simplex_weights(n, alpha_rng)
            blend = interpolate_modes(params, alpha)
            _, g = nn.backward(blend, pool.x[idx], pool.y[idx], pool.mask[idx])
            div = pairwise_cosine_grad(params) if n > 1 and modes.beta_max != 0 else None
            updated = []
            for i, p in enumerate(params):
                p = nn.optimizer_step(p, nn.scale(alpha[i], g), settings.lr)
                if div is not None:
                    p = _retract(p, nn.optimizer_step(p, div[i], settings.lr * modes.beta_max))
                updated.append(p)
            params = updated
        if on_epoch is not None:
            on_epoch(epoch, params)
    out = ModeSet([ModeState.fresh(p, i) for i, p in enumerate(params)], modes.beta_max, modes.beta_min)
    return out


# ---------------------------------------------------------------- drift penalty

def estimate_fisher(params: nn.ParamSet, dataset: TaskDataset, sample_cap: int = 200,
                    mask: np.ndarray | None = None, others: Sequence[nn.ParamSet] = ()) -> nn.ParamSet:
    """Empirical Fisher diagonal: mean squared per-sample log-likelihood gradient.

    With ``others`` the likelihood is that of the averaged prediction of
    ``params`` and ``others``, differentiated with respect to ``params`` only.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    k = min(sample_cap, len(dataset))
    idx = np.unique(np.linspace(0, len(dataset) - 1, k).round().astype(int))
    mask = dataset.mask if mask is None else mask
    x, y = dataset.x[idx], dataset.y[idx]
    rest = None
    n = 1 + len(others)
    if others:
        rest = sum(nn.forward(o, x, mask) for o in others) / n
    _, (gw, gb) = nn.backward(params, x, y, mask, weight=1.0 / n, mix_rest=rest, per_sample=True)
    return nn.ParamSet([np.mean(w**2, axis=0) for w in gw], [np.mean(b**2, axis=0) for b in gb],
                       params.activation)


def ewc_penalty(params: nn.ParamSet, anchor: nn.ParamSet, fisher: nn.ParamSet, lam: float):
    """``sum lam/2 * F * (theta - anchor)^2`` and its gradient."""
    if any((f < 0).any() for f in fisher.weights + fisher.biases):
        raise InvariantViolation("Fisher diagonal has negative entries")
    delta = nn.axpy(-1.0, anchor, params)
    grad = nn.scale(lam, nn.multiply(fisher, delta))
    value = 0.5 * float(np.dot(nn.flatten(grad), nn.flatten(delta)))
    return value, grad


def penalized_step(params: nn.ParamSet, grads: nn.ParamSet, lr: float, anchor: nn.ParamSet,
                   fisher: nn.ParamSet, lam: float) -> nn.ParamSet:
    """Descent step on ``loss + ewc_penalty``, with the quadratic penalty solved
    exactly per coordinate.

    ``theta' = (theta - lr*g + lr*lam*F*anchor) / (1 + lr*lam*F)``. Agrees with a
    plain step to first order in ``lr*lam*F`` and stays stable for any ``lam``
    (a plain step diverges once ``lr*lam*F > 2``).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")

    def step(p, g, a, f):
        k = lr * lam * f
        return (p - lr * g + k * a) / (1.0 + k)

    return nn.ParamSet([step(*z) for z in zip(params.weights, grads.weights, anchor.weights, fisher.weights)],
                       [step(*z) for z in zip(params.biases, grads.biases, anchor.biases, fisher.biases)],
                       params.activation)


# ---------------------------------------------------------------- adaptation

def joint_inference(x, modes, mask: np.ndarray | None = None) -> np.ndarray:
    params = _param_list(modes)
    if not params:
        raise ValueError("no modes")
    return sum(nn.forward(p, x, mask) for p in params) / len(params)


def update_parameters(dataset: TaskDataset, val: TaskDataset, modes: ModeSet, settings: TrainSettings,
                      seed: int, drift_weight: float = 0.1, enumeration_cap: int = 4096,
                      selection_distance: str = "fisher", on_epoch=None) -> tuple[ModeSet, CheckpointSelection]:
    """Adapt every mode to a new task, then backtrack over per-epoch checkpoints.

    Within an epoch the modes are visited in index order. While mode ``i``
    trains, the other modes' softmax outputs are held fixed; the loss is the
    cross-entropy of the averaged distribution plus ``beta_min`` times mode
    ``i``'s EWC penalty against its own anchor and Fisher diagonal.
    """
    if dataset.task_index < 2:
        raise StateError("task 1 goes through initialize_task1")
    n = modes.n
    anchors = [m.params.copy() for m in modes.modes]
    fishers = [m.fisher for m in modes.modes]
    params = [m.params.copy() for m in modes.modes]
    history = [[(0, a.copy())] for a in anchors]
    pool = Pool.from_datasets([dataset])
    for epoch in range(1, settings.epochs + 1):
        for i in range(n):
            for idx in pool.batch_indices(settings.batch_size, derive_seed(seed, "epoch", epoch, i)):
                x, y, mask = pool.x[idx], pool.y[idx], pool.mask[idx]
                rest = sum((nn.forward(params[j], x, mask) for j in range(n) if j != i),
                           np.zeros((len(idx), mask.shape[1])))
                _, g = nn.backward(params[i], x, y, mask, weight=1.0 / n, mix_rest=rest / n)
                params[i] = penalized_step(params[i], g, settings.lr, anchors[i], fishers[i], modes.beta_min)
        for i in range(n):
            history[i].append((epoch, params[i].copy()))
        if on_epoch is not None:
            on_epoch(epoch, params)
    selection = backtrack_select(history, anchors, fishers, val, drift_weight, enumeration_cap,
                                 selection_distance)
    chosen = [dict(history[i])[e] for i, e in enumerate(selection.epochs)]
    out = ModeSet([ModeState(chosen[i].copy(), anchors[i], fishers[i], i, history[i]) for i in range(n)],
                  modes.beta_max, modes.beta_min)
    return out, selection


def _unit_fisher(fishers, selection_distance: str):
    if selection_distance == "fisher":
        return fishers
    if selection_distance == "euclidean":
        return [f.map(np.ones_like) for f in fishers]
    raise ValueError(f"unknown selection distance {selection_distance!r}")


def _checkpoint_tables(history, anchors, fishers, val: TaskDataset):
    probs = np.stack([np.stack([nn.forward(p, val.x, val.mask) for _, p in h]) for h in history])
    drift = np.array([[ewc_penalty(p, anchors[i], fishers[i], 1.0)[0] for _, p in h]
                      for i, h in enumerate(history)])
    return probs, drift


def combination_objective(history, anchors, fishers, val: TaskDataset, epochs: Sequence[int],
                          drift_weight: float, selection_distance: str = "fisher") -> float:
    """Backtracking criterion for one explicit combination of checkpoints."""
    fishers = _unit_fisher(fishers, selection_distance)
    chosen = [dict(h)[e] for h, e in zip(history, epochs)]
    rho = joint_inference(val.x, chosen, val.mask)
    ce = float(np.mean(nn.cross_entropy(rho, val.y)))
    drift = sum(ewc_penalty(p, a, f, 1.0)[0] for p, a, f in zip(chosen, anchors, fishers))
    return ce + drift_weight * drift


def backtrack_select(history, anchors, fishers, val: TaskDataset, drift_weight: float = 0.1,
                     enumeration_cap: int = 4096, selection_distance: str = "fisher",
                     chunk: int = 256) -> CheckpointSelection:
    """Exhaustive search over one checkpoint per mode.

    Minimises validation cross-entropy of the averaged distribution plus
    ``drift_weight`` times the summed unit-strength EWC penalties. Ties go to
    the lexicographically smallest epoch tuple. Above ``enumeration_cap``
    combinations each mode is chosen greedily with the others at their last
    checkpoint.
    """
    if any(len(h) == 0 for h in history):
        raise ValueError("every mode needs at least one checkpoint")
    n = len(history)
    counts = [len(h) for h in history]
    epoch_ids = [[e for e, _ in h] for h in history]
    fishers = _unit_fisher(fishers, selection_distance)
    probs_by_mode, drift = _checkpoint_tables(history, anchors, fishers, val)
    rows = np.arange(len(val))
    total = int(np.prod(counts))

    def objective(combos: np.ndarray) -> np.ndarray:
        rho = sum(probs_by_mode[i][combos[:, i]] for i in range(n)) / n
        ce = -np.log(np.maximum(rho[:, rows, val.y], nn.PROB_FLOOR)).mean(axis=1)
        return ce + drift_weight * sum(drift[i][combos[:, i]] for i in range(n))

    if total > enumeration_cap:
        log.warning("%d checkpoint combinations exceed the cap of %d; selecting greedily", total,
                    enumeration_cap)
        pick = [c - 1 for c in counts]
        for i in range(n):
            trial = np.array([pick[:i] + [k] + pick[i + 1:] for k in range(counts[i])])
            pick[i] = int(np.argmin(objective(trial)))
        value = float(objective(np.array([pick]))[0])
        return CheckpointSelection([epoch_ids[i][k] for i, k in enumerate(pick)], value, drift_weight, False)

    best_val, best = np.inf, None
    product = itertools.product(*(range(c) for c in counts))
    while True:
        block = np.array(list(itertools.islice(product, chunk)), dtype=int)
        if block.size == 0:
            break
        values = objective(block)
        k = int(np.argmin(values))
        if values[k] < best_val:
            best_val, best = float(values[k]), block[k]
    return CheckpointSelection([epoch_ids[i][k] for i, k in enumerate(best)], best_val, drift_weight, True)


# ---------------------------------------------------------------- learner

class MotaLearner(Learner):
    """N small modes: diversified on task 1, adapted jointly afterwards."""

    name = "mota"

    def __init__(self, spec, settings, master_seed, replicate, n_modes=2, beta_max=100.0, beta_min=1000.0,
                 drift_weight=0.1, enumeration_cap=4096, fisher_samples=200, init_params=None,
                 selection_distance="fisher", joint_fisher=True, keep_checkpoints=False,
                 record_trajectory=False):
        super().__init__(spec, settings, master_seed, replicate, record_trajectory)
        self.joint_fisher = joint_fisher
        self.keep_checkpoints = keep_checkpoints
        self.checkpoints: dict[int, list[list[tuple[int, nn.ParamSet]]]] = {}
        self.n_modes = n_modes
        self.beta_max = beta_max
        self.beta_min = beta_min
        self.drift_weight = drift_weight
        self.enumeration_cap = enumeration_cap
        self.fisher_samples = fisher_samples
        self.selection_distance = selection_distance
        self.init = init_params
        self.modeset = ModeSet.from_init(init_params, n_modes, beta_max, beta_min)
        self.modes = self.modeset.params
        self.selections: dict[int, CheckpointSelection] = {}

    def _recorder(self, task):
        def on_epoch(epoch, params):
            for i, p in enumerate(params):
                self.record(task, epoch, i, p)
        return on_epoch

    def learn(self, feed: TaskFeed) -> None:
        task = feed.current
        t = task.index
        if t == 1:
            for i, p in enumerate(self.modeset.params):
                self.record(1, 0, i, p)
            ms = initialize_task1(task.train, self.modeset, self.settings, self.seed(t), self._recorder(t))
        else:
            ms, sel = update_parameters(task.train, task.val, self.modeset, self.settings, self.seed(t),
                                        self.drift_weight, self.enumeration_cap, self.selection_distance,
                                        self._recorder(t))
            self.selections[t] = sel
            if self.keep_checkpoints:
                self.checkpoints[t] = [m.checkpoints for m in ms.modes]
        # Fisher of the joint prediction on this task anchors the next one
        for i, m in enumerate(ms.modes):
            others = [o.params for j, o in enumerate(ms.modes) if j != i]
            m.fisher = estimate_fisher(m.params, task.train, self.fisher_samples,
                                       others=others if self.joint_fisher else ())
            m.anchor = m.params.copy()
        self.modeset = ms
        self.modes = ms.params

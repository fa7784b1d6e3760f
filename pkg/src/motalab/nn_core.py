"""Feed-forward classifier with manual backpropagation.

Everything here works on batches: ``x`` is ``[B, input_dim]`` and ``y`` is an
integer vector of length ``B``. A label mask (boolean, broadcastable to
``[B, K]``) restricts the softmax to a task's label set; masked logits are
excluded from the normalisation and receive zero gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


@dataclass
class ParamSet:
    """Ordered per-layer ``(W [out x in], b [out])`` pairs.

    Also used for gradients and Fisher diagonals, which share the layout.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"bad layer shapes {w.shape} / {b.shape}")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ShapeError("adjacent layer shapes do not compose")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def layers(self):
        return zip(self.weights, self.biases)

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(w) for w in self.weights],
                        [np.zeros_like(b) for b in self.biases], self.activation)

    def map(self, fn) -> "ParamSet":
        return ParamSet([fn(w) for w in self.weights], [fn(b) for b in self.biases], self.activation)

    def layer_vector(self, i: int) -> np.ndarray:
        """Layer ``i`` as one flat vector (weights then bias)."""
        return np.concatenate([self.weights[i].ravel(), self.biases[i]])

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers())


def _check_aligned(a: ParamSet, b: ParamSet) -> None:
    if a.shapes != b.shapes:
        raise ShapeError(f"architectures differ: {a.shapes} vs {b.shapes}")


def init_params(spec: NetworkSpec, rng: np.random.Generator, zero_readout: bool = False) -> ParamSet:
    """Glorot-uniform weights, zero biases.

    With ``zero_readout`` the output layer starts at zero, so every class row
    is neutral until trained on.
    """
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if zero_readout:
        weights[-1] = np.zeros_like(weights[-1])
    return ParamSet(weights, biases, spec.activation)


def zero_params(spec: NetworkSpec) -> ParamSet:
    sizes = spec.layer_sizes
    return ParamSet([np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                    [np.zeros(o) for o in sizes[1:]], spec.activation)


# ---------------------------------------------------------------- arithmetic

def axpy(a: float, x: ParamSet, y: ParamSet) -> ParamSet:
    _check_aligned(x, y)
    return ParamSet([a * wx + wy for wx, wy in zip(x.weights, y.weights)],
                    [a * bx + by for bx, by in zip(x.biases, y.biases)], y.activation)


def scale(a: float, x: ParamSet) -> ParamSet:
    return x.map(lambda v: a * v)


def multiply(x: ParamSet, y: ParamSet) -> ParamSet:
    _check_aligned(x, y)
    return ParamSet([wx * wy for wx, wy in zip(x.weights, y.weights)],
                    [bx * by for bx, by in zip(x.biases, y.biases)], y.activation)


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([params.layer_vector(i) for i in range(params.n_layers)])


def unflatten(vec: np.ndarray, like: ParamSet) -> ParamSet:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (dims(like),):
        raise ShapeError(f"vector of length {vec.size} does not fit {dims(like)} parameters")
    weights, biases, pos = [], [], 0
    for w, b in like.layers():
        weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(vec[pos:pos + b.size].copy())
        pos += b.size
    return ParamSet(weights, biases, like.activation)


def dims(params: ParamSet) -> int:
    return sum(w.size + b.size for w, b in params.layers())


# ---------------------------------------------------------------- forward / loss

def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input of shape {x.shape} does not match input_dim {params.weights[0].shape[1]}")
    return x


def _forward_cache(params: ParamSet, x: np.ndarray):
    zs, acts = [], [x]
    a = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(params.layers()):
        z = a @ w.T + b
        zs.append(z)
        a = z if i == last else _act(z, params.activation)
        acts.append(a)
    if not np.isfinite(a).all():
        raise NumericError("non-finite logits")
    return zs, acts


def logits(params: ParamSet, x) -> np.ndarray:
    return _forward_cache(params, _as_batch(params, x))[1][-1]


def forward(params: ParamSet, x, mask: np.ndarray | None = None) -> np.ndarray:
    """Class probabilities; a single vector in gives a single vector out."""
    single = np.asarray(x).ndim == 1
    probs = masked_softmax(logits(params, x), mask)
    return probs[0] if single else probs


def cross_entropy(probs, y) -> float | np.ndarray:
    """``-log(max(p[y], floor))``; vectorised over a batch of rows."""
    probs = np.asarray(probs, dtype=float)
    y = np.asarray(y)
    k = probs.shape[-1]
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"label out of range for {k} classes")
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(y)], PROB_FLOOR)))
    py = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(py, PROB_FLOOR))


def backward(params: ParamSet, x, y, mask: np.ndarray | None = None,
             prob_override: np.ndarray | None = None, weight: float = 1.0,
             mix_rest: np.ndarray | None = None, per_sample: bool = False):
    """Batch-mean cross-entropy and its exact gradient.

    With ``prob_override`` (the averaged multi-mode distribution) the loss is
    taken on that distribution and this network enters it with mixture weight
    ``weight`` (``1/N`` for joint inference). Other contributors are constants.
    ``mix_rest`` is the summed, already-weighted output of those other
    contributors; when given, the averaged distribution is formed here as
    ``weight * p + mix_rest``.

    ``per_sample=True`` returns per-sample losses and a list of per-sample
    gradients instead (used by the Fisher estimate).
    """
    x = _as_batch(params, x)
    y = np.asarray(y, dtype=int)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    if len(x) != n:
        raise ShapeError("x and y lengths differ")
    zs, acts = _forward_cache(params, x)
    p = masked_softmax(acts[-1], mask)
    rows = np.arange(n)
    if mix_rest is not None:
        prob_override = weight * p + mix_rest
    if prob_override is None:
        ref = p
        coef = np.ones(n)
    else:
        ref = np.asarray(prob_override, dtype=float)
        if ref.shape != p.shape:
            raise ShapeError("prob_override shape does not match the network output")
        coef = weight * p[rows, y] / np.maximum(ref[rows, y], PROB_FLOOR)
    losses = cross_entropy(ref, y)
    # clamped region has constant loss
    coef = np.where(ref[rows, y] < PROB_FLOOR, 0.0, coef)
    delta = p.copy()
    delta[rows, y] -= 1.0
    delta *= coef[:, None]
    if per_sample:
        return losses, _backprop_per_sample(params, zs, acts, delta)
    delta /= n
    return float(losses.mean()), _backprop(params, zs, acts, delta)


def _backprop(params: ParamSet, zs, acts, delta: np.ndarray) -> ParamSet:
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * _act_grad(zs[i - 1], acts[i], params.activation)
    return ParamSet(gw, gb, params.activation)


def _backprop_per_sample(params: ParamSet, zs, acts, delta: np.ndarray):
    """Per-sample gradients as ``(weights [B, out, in], biases [B, out])`` per layer."""
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        gw[i] = delta[:, :, None] * acts[i][:, None, :]
        gb[i] = delta.copy()
        if i > 0:
            delta = (delta @ params.weights[i]) * _act_grad(zs[i - 1], acts[i], params.activation)
    return gw, gb


def optimizer_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return axpy(-lr, grads, params)


# ---------------------------------------------------------------- serialization

def params_to_bytes(params: ParamSet) -> bytes:
    """Little-endian header (layer count, then out/in per layer) + float64 body."""
    header = [params.n_layers]
    for out, inp in params.shapes:
        header += [out, inp]
    head = struct.pack(f"<{len(header)}q", *header)
    return head + flatten(params).astype("<f8").tobytes()


def params_from_bytes(data: bytes, activation: str = "relu") -> ParamSet:
    (m,) = struct.unpack_from("<q", data, 0)
    dims_ = struct.unpack_from(f"<{2 * m}q", data, 8)
    shapes = [(dims_[2 * i], dims_[2 * i + 1]) for i in range(m)]
    body = np.frombuffer(data, dtype="<f8", offset=8 * (1 + 2 * m)).astype(float)
    template = ParamSet([np.zeros(s) for s in shapes], [np.zeros(s[0]) for s in shapes], activation)
    return unflatten(body, template)


def save_params(params: ParamSet, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: str | Path, activation: str = "relu") -> ParamSet:
    return params_from_bytes(Path(path).read_bytes(), activation)


def vectors_to_bytes(vectors: Sequence[np.ndarray], like: ParamSet) -> bytes:
    """Several flat vectors of one architecture, each in the ParamSet format."""
    return b"".join(params_to_bytes(unflatten(v, like)) for v in vectors)

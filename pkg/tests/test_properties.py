import random

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from motalab import landscape as ls
from motalab import metrics as M
from motalab import mota_core as mc
from motalab import nn_core as nn
from motalab.harness import config as C
from motalab.task_stream import split

finite = st.floats(-50, 50, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.integers(2, 6), st.integers(1, 8))
def test_softmax_normalisation(seed, k, n):
    rng = np.random.default_rng(seed)
    p = nn.init_params(nn.NetworkSpec(3, (4,), k), rng)
    out = nn.forward(p, rng.standard_normal((n, 3)) * 10)
    assert np.all(out >= 0) and np.allclose(out.sum(axis=1), 1, atol=1e-9)


@given(seeds, st.integers(2, 4))
def test_cosine_bounds_and_joint_inference(seed, n):
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec(3, (4,), 3)
    modes = [nn.init_params(spec, rng) for _ in range(n)]
    assert -1 - 1e-12 <= mc.pairwise_cosine(modes) <= 1 + 1e-12
    rho = mc.joint_inference(rng.standard_normal((5, 3)), modes)
    assert np.allclose(rho.sum(axis=1), 1, atol=1e-9)


@given(seeds, st.integers(1, 6))
def test_simplex_and_interpolation_are_convex(seed, n):
    rng = np.random.default_rng(seed)
    alpha = mc.sample_simplex_weights(n, rng)
    assert abs(alpha.sum() - 1) < 1e-12 and (alpha >= 0).all()
    modes = [nn.ParamSet([rng.standard_normal((2, 2))], [rng.standard_normal(2)]) for _ in range(n)]
    mix = nn.flatten(mc.interpolate_modes(modes, alpha))
    stack = np.stack([nn.flatten(m) for m in modes])
    assert (mix <= stack.max(axis=0) + 1e-12).all() and (mix >= stack.min(axis=0) - 1e-12).all()


@given(seeds, st.floats(0.1, 1e4))
@settings(max_examples=20)
def test_ewc_gradient_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    spec = nn.NetworkSpec(2, (3,), 2)
    p, a = nn.init_params(spec, rng), nn.init_params(spec, rng)
    f = p.map(lambda w: rng.random(w.shape))
    _, g = mc.ewc_penalty(p, a, f, lam)
    flat, h = nn.flatten(p), 1e-4
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        num = (mc.ewc_penalty(nn.unflatten(up, p), a, f, lam)[0]
               - mc.ewc_penalty(nn.unflatten(dn, p), a, f, lam)[0]) / (2 * h)
        ana = nn.flatten(g)[k]
        assert abs(ana - num) <= 1e-6 * max(abs(ana), abs(num), 1e-6)


@given(st.lists(st.integers(0, 3), min_size=12, max_size=80), seeds)
def test_split_is_a_stratified_partition(labels, seed):
    y = np.array(labels)
    if min(np.bincount(y, minlength=4)[np.unique(y)]) < 3:
        return
    parts = split(np.zeros((len(y), 1)), y, seed=seed)
    assert sorted(np.concatenate(parts).tolist()) == list(range(len(y)))
    for c in np.unique(y):
        n = int((y == c).sum())
        for part, frac in zip(parts, (0.7, 0.1, 0.2)):
            assert abs(int((y[part] == c).sum()) - frac * n) <= 1


@given(arrays(float, (4, 4), elements=st.floats(0, 1)))
def test_metric_ranges(acc):
    A = M.AccuracyMatrix.from_full(acc, [0.5] * 4)
    bwt, rem = M.backward_transfer(A, 4), M.remembering(A, 4)
    assert 0 <= rem <= 1
    if bwt <= 0:
        assert abs(rem - (1 + bwt)) < 1e-12


@given(arrays(float, (4, 4), elements=st.floats(0, 1)))
def test_forgetting_non_negative_for_monotone_columns(acc):
    # each task's accuracy only decays after it is learned
    acc = np.minimum.accumulate(np.tril(acc) + np.triu(np.ones((4, 4)), 1), axis=0)
    assert M.forgetting(M.AccuracyMatrix.from_full(acc, [0.5] * 4)) >= 0


@given(st.lists(arrays(float, (3, 3), elements=finite), min_size=1, max_size=3))
def test_normalized_grids_lie_in_unit_interval(values):
    grids = [ls.LossGrid(1, np.zeros(1), np.zeros(1), np.linspace(-1, 1, 3), v) for v in values]
    for g in ls.normalize_grids(grids):
        assert (g.losses >= 0).all() and (g.losses <= 1).all()


@given(st.randoms(use_true_random=False))
@settings(max_examples=20)
def test_config_hash_is_order_free(rnd: random.Random):
    raw = {"train": {"epochs": 7, "lr": 0.2, "batch_size": 32}, "stream": {"n_tasks": 4, "cluster_std": 0.8},
           "mota": {"drift_weight": 0.3}}
    shuffled = {}
    for section in rnd.sample(list(raw), len(raw)):
        keys = rnd.sample(list(raw[section]), len(raw[section]))
        shuffled[section] = {k: raw[section][k] for k in keys}
    assert C.config_hash(C.merge(raw)) == C.config_hash(C.merge(shuffled))

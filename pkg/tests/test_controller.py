import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adore.controller import (ControllerDataset, ControllerParams, ControllerTrainConfig,
                              ReleasedPool, ScoreState, build_labels, evaluate_controller,
                              loss_and_grads, score_sequence, score_token, select_rebuild,
                              train_controller)
from adore.errors import CapacityError, ConfigError, ContractViolation, DimensionError
from adore.model.traces import TraceRecord
from adore.numkernel import make_rng


def _sig(a):
    return 1 / (1 + math.exp(-a))


def scalar_scores(params, xs, positions):
    """Loop-level reimplementation of the unidirectional scorer."""
    t = params.tensors
    n_h = params.hidden_dim
    h = [0.0] * n_h
    out = []
    for x, pos in zip(xs, positions):
        def lin(w, u, b, hv):
            return [b[j] + sum(x[i] * w[i, j] for i in range(len(x)))
                    + sum(hv[i] * u[i, j] for i in range(n_h)) for j in range(n_h)]
        z = [_sig(a) for a in lin(t["gru.w_z"], t["gru.u_z"], t["gru.b_z"], h)]
        r = [_sig(a) for a in lin(t["gru.w_r"], t["gru.u_r"], t["gru.b_r"], h)]
        cand = [math.tanh(a) for a in lin(t["gru.w_h"], t["gru.u_h"], t["gru.b_h"],
                                           [r[i] * h[i] for i in range(n_h)])]
        h = [z[j] * h[j] + (1 - z[j]) * cand[j] for j in range(n_h)]
        p = [pos / params.pos_scale * t["pos.w"][j] + t["pos.b"][j] + h[j] for j in range(n_h)]
        a = [math.tanh(t["int.b"][j] + sum(p[i] * t["int.w"][i, j] for i in range(n_h)))
             for j in range(n_h)]
        out.append(_sig(t["out.b"][0] + sum(a[j] * t["out.w"][j] for j in range(n_h))))
    return np.array(out)


# --------------------------------------------------------------- scoring


def test_zero_params_score_one_half():
    p = ControllerParams.zeros_like(ControllerParams.init(make_rng(0), 6, 4))
    s, state = score_token(np.ones(6, np.float32), 3, ScoreState.initial(p), p)
    assert s == 0.5 and state.sigmas == [0.5]


def test_sixteen_token_sequence_matches_oracle():
    rng = make_rng(1)
    p = ControllerParams.init(rng, 8, 6)
    xs = rng.normal(size=(16, 8)).astype(np.float32)
    ref = scalar_scores(p, xs, range(16))
    state = ScoreState.initial(p)
    inc = []
    for i, x in enumerate(xs):
        s, state = score_token(x, i, state, p)
        inc.append(s)
    assert np.max(np.abs(np.array(inc) - ref)) <= 1e-6
    assert np.max(np.abs(score_sequence(p, xs) - ref)) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 999), st.integers(2, 20), st.sampled_from(["uni", "mlp"]))
def test_scores_are_causal(seed, n, variant):
    rng = make_rng(seed)
    p = ControllerParams.init(rng, 5, 4, variant=variant)
    xs = rng.normal(size=(n, 5)).astype(np.float32)
    full = score_sequence(p, xs)
    cut = int(rng.integers(1, n + 1))
    assert np.allclose(score_sequence(p, xs[:cut]), full[:cut], atol=1e-6)
    assert np.all((full > 0) & (full < 1))


def test_bidirectional_scores_see_the_future():
    rng = make_rng(2)
    p = ControllerParams.init(rng, 5, 4, variant="bi")
    xs = rng.normal(size=(6, 5)).astype(np.float32)
    assert not np.allclose(score_sequence(p, xs[:3]), score_sequence(p, xs)[:3])
    with pytest.raises(ContractViolation):
        score_token(xs[0], 0, ScoreState.initial(p), p)


def test_score_token_errors():
    p = ControllerParams.init(make_rng(0), 4, 3, max_position=10)
    with pytest.raises(CapacityError):
        score_token(np.zeros(4), 10, ScoreState.initial(p), p)
    with pytest.raises(DimensionError):
        score_token(np.zeros(5), 0, ScoreState.initial(p), p)
    with pytest.raises(ConfigError):
        ControllerParams({}, variant="lstm")


@pytest.mark.parametrize("variant", ["uni", "bi", "mlp"])
def test_gradients_match_finite_differences(variant):
    rng = make_rng(4)
    p = ControllerParams.init(rng, 5, 4, variant=variant, dtype=np.float64)
    for v in p.tensors.values():
        v += rng.normal(0, 0.3, v.shape)
    x = rng.normal(size=(2, 7, 5))
    y = rng.integers(0, 2, (2, 7))
    pos = np.arange(100, 107)
    _, grads = loss_and_grads(p, x, y, pos)
    eps = 1e-5
    for name, t in p.tensors.items():
        num = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + eps
            up = loss_and_grads(p, x, y, pos)[0]
            t[idx] = old - eps
            down = loss_and_grads(p, x, y, pos)[0]
            t[idx] = old
            num[idx] = (up - down) / (2 * eps)
        assert np.max(np.abs(num - grads[name])) <= 1e-6 + 1e-4 * np.max(np.abs(num)), name


# ---------------------------------------------------------------- labels


def _rec(step, sets, weights=None):
    return TraceRecord(step, [np.array(s, np.int64) for s in sets], np.array([], np.int64), 0,
                       None if weights is None else [np.array(w) for w in weights])


def test_labels_count_frequency():
    traces = [_rec(0, [[], []]), _rec(1, [[0], [0]]), _rec(2, [[1], [0]]), _rec(3, [[2], [1]])]
    # counts: 0 -> 3, 1 -> 2, 2 -> 1, 3 -> 0
    assert list(build_labels(traces, 2)) == [1, 1, 0, 0]
    assert list(build_labels(traces, 10)) == [1, 1, 1, 1]


def test_labels_tie_breaks():
    traces = [_rec(0, [[]]), _rec(1, [[0]]), _rec(2, [[1]]), _rec(3, [[2]])]
    # equal counts, no weights: recency wins
    assert list(build_labels(traces, 1)) == [0, 0, 1, 0]
    weighted = [_rec(0, [[]], [[]]), _rec(1, [[0]], [[0.9]]), _rec(2, [[1]], [[0.5]]),
                _rec(3, [[2]], [[0.2]])]
    assert list(build_labels(weighted, 1)) == [1, 0, 0, 0]


def test_label_modes():
    traces = [_rec(0, [[]]), _rec(1, [[0]]), _rec(2, [[0]]), _rec(3, [[2]])]
    assert list(build_labels(traces, 1, "count")) == [1, 0, 0, 0]
    # position 2 is picked by the only set eligible to pick it
    assert list(build_labels(traces, 1, "rate")) == [0, 0, 1, 0]
    assert list(build_labels(traces, 1, "final")) == [0, 0, 1, 0]
    with pytest.raises(ConfigError):
        build_labels(traces, 1, "mean")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 20), st.integers(0, 999))
def test_label_count_is_min_k_n(n, k, seed):
    rng = make_rng(seed)
    traces = [_rec(s, [np.sort(rng.choice(s, min(2, s), replace=False)) for _ in range(3)])
              for s in range(n)]
    assert int(build_labels(traces, k).sum()) == min(k, n)


# ------------------------------------------------------------- training


def _toy_data(n_seq, length, rule, seed=0, dim=6):
    rng = make_rng(seed)
    xs, ys, ps = [], [], []
    for _ in range(n_seq):
        x = rng.normal(size=(length, dim)).astype(np.float32)
        xs.append(x)
        ys.append(rule(x).astype(np.int8))
        ps.append(np.arange(length))
    return ControllerDataset(xs, ys, ps)


def test_constant_positive_labels_learned():
    data = _toy_data(16, 12, lambda x: np.ones(len(x)))
    p = ControllerParams.init(make_rng(0), 6, 8)
    res = train_controller(data, p, ControllerTrainConfig(epochs=15, lr=0.02, k=4))
    assert np.all(score_sequence(res.params, data.inputs[0]) > 0.9)


def test_separable_labels_reach_high_f1():
    data = _toy_data(60, 16, lambda x: x[:, 0] > 0.5)
    p = ControllerParams.init(make_rng(0), 6, 8)
    res = train_controller(data, p, ControllerTrainConfig(epochs=25, lr=0.02, k=5))
    assert res.best.f1 >= 0.95
    assert evaluate_controller(res.params, data, 5).f1 >= 0.95


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train_controller(ControllerDataset([], [], []),
                         ControllerParams.init(make_rng(0), 4, 3))
    with pytest.raises(DimensionError):
        ControllerDataset([np.zeros((3, 2))], [np.zeros(2)], [np.arange(3)])


# ------------------------------------------------------------ rebuild pool


def test_select_rebuild_examples():
    pool = ReleasedPool()
    for tok, pos, s in [(10, 0, 0.9), (11, 3, 0.2), (12, 5, 0.7), (13, 8, 0.7)]:
        pool.add(tok, pos, s)
    assert select_rebuild(pool, 0) == []
    assert select_rebuild(pool, 2) == [(10, 0), (13, 8)]
    assert select_rebuild(pool, 9) == [(10, 0), (11, 3), (12, 5), (13, 8)]
    assert select_rebuild(ReleasedPool(), 3) == []
    with pytest.raises(ValueError):
        select_rebuild(pool, -1)
    with pytest.raises(ContractViolation):
        pool.add(1, 5, 0.1)
    pool.take([0, 8])
    assert list(pool.positions) == [3, 5]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=0, max_size=30), st.integers(0, 10))
def test_select_rebuild_matches_sort_oracle(scores, r):
    pool = ReleasedPool()
    for i, s in enumerate(scores):
        pool.add(100 + i, 2 * i, s)
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], -i))[:r]
    assert select_rebuild(pool, r) == [(100 + i, 2 * i) for i in sorted(ranked)]

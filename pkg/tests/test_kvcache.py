import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adore.errors import ConfigError, ContractViolation, DimensionError
from adore.kvcache import (CacheSet, PolicyConfig, build_slicing_matrix, evict_and_append,
                           gather_remove_row, ideal_topk_indices, select_victim, slice_remove_row)
from adore.numkernel import make_rng


# --------------------------------------------------------------- slicing


def test_slicing_matrix_examples():
    assert np.array_equal(build_slicing_matrix(0, 3), [[0, 1, 0], [0, 0, 1]])
    assert np.array_equal(build_slicing_matrix(2, 3), [[1, 0, 0], [0, 1, 0]])
    assert build_slicing_matrix(0, 1).shape == (0, 1)
    with pytest.raises(IndexError):
        build_slicing_matrix(3, 3)


def test_slice_remove_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], np.float32)
    assert np.array_equal(slice_remove_row(m, 1), [[1, 2], [5, 6]])
    assert slice_remove_row(m[:1], 0).shape == (0, 2)
    with pytest.raises(IndexError):
        slice_remove_row(m, -1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 24), st.integers(1, 12), st.data())
def test_slicing_equals_gather_bitwise(rows, cols, data):
    j = data.draw(st.integers(0, rows - 1))
    m = make_rng(rows * 31 + cols).normal(0, 10, (rows, cols)).astype(np.float32)
    m[0, 0] = 0.0
    assert np.array_equal(slice_remove_row(m, j), gather_remove_row(m, j))
    assert slice_remove_row(m, j).tobytes() == gather_remove_row(m, j).tobytes()


def test_slicing_turns_negative_zero_positive():
    # 1*(-0) + 0*x sums to +0 under IEEE rules; values still compare equal
    m = np.array([[-0.0], [1.0], [2.0]], np.float32)
    out = slice_remove_row(m, 2)
    assert np.array_equal(out, gather_remove_row(m, 2))
    assert not np.signbit(out[0, 0])


# ---------------------------------------------------------------- oracle


def test_ideal_topk_examples():
    keys = np.eye(4, dtype=np.float32)
    q = np.array([0.1, 0.9, 0.5, 0.2], np.float32)
    assert list(ideal_topk_indices(q, keys, 2)) == [1, 2]
    assert list(ideal_topk_indices(q, keys, 10)) == [0, 1, 2, 3]
    tied = np.ones((3, 2), np.float32)
    assert list(ideal_topk_indices(np.ones(2, np.float32), tied, 2)) == [0, 1]
    with pytest.raises(DimensionError):
        ideal_topk_indices(q, np.zeros((0, 4), np.float32), 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 999))
def test_ideal_topk_matches_sort_oracle(n, k, seed):
    rng = make_rng(seed)
    keys = rng.normal(size=(n, 6))
    q = rng.normal(size=6)
    scores = [float(np.dot(keys[i], q)) for i in range(n)]
    ranked = sorted(range(n), key=lambda i: (-scores[i], i))
    assert list(ideal_topk_indices(q, keys, k)) == sorted(ranked[:k])


# --------------------------------------------------------------- config


def test_policy_config_validation():
    with pytest.raises(ConfigError):
        PolicyConfig(kind="lru")
    with pytest.raises(ConfigError):
        PolicyConfig(kind="window", capacity=8, k=16)
    with pytest.raises(ConfigError):
        PolicyConfig(kind="adore", capacity=32, rebuild=33)
    with pytest.raises(ConfigError):
        PolicyConfig(kind="window", capacity=32, rebuild=2)
    p = PolicyConfig.make("adore")
    assert (p.capacity, p.rebuild) == (32, 4)
    assert PolicyConfig.make("full").capacity is None


# --------------------------------------------------------------- victims


def test_adore_victim_examples():
    p = PolicyConfig(kind="adore", capacity=3, k=1)
    assert select_victim(p, np.array([0, 1, 2]), np.array([0.2, 0.9, 0.5])) == 0
    # ties resolve to the oldest entry
    assert select_victim(p, np.array([5, 2, 9]), np.array([0.4, 0.4, 0.8])) == 1


def test_window_and_sink_victims():
    w = PolicyConfig(kind="window", capacity=4, k=2)
    assert select_victim(w, np.array([7, 3, 9, 5]), None) == 1
    s = PolicyConfig(kind="sink", capacity=6, k=2, n_sink=4)
    assert select_victim(s, np.array([0, 1, 2, 3, 7, 8]), None) == 4


def test_strided_victim_keeps_grid():
    p = PolicyConfig(kind="strided", capacity=4, k=2, stride=4)
    assert select_victim(p, np.array([0, 4, 5, 6]), None) == 2
    assert select_victim(p, np.array([0, 4, 8, 12]), None) == 0


def test_victim_requires_full_cache_and_scores():
    p = PolicyConfig(kind="h2o", capacity=3, k=1)
    with pytest.raises(ContractViolation):
        select_victim(p, np.array([0, 1]), np.array([0.1, 0.2]))
    with pytest.raises(ContractViolation):
        select_victim(p, np.array([0, 1, 2]), None)
    assert select_victim(PolicyConfig.make("full"), np.arange(5), None) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=16), st.floats(0.1, 10.0))
def test_argmin_victim_is_scale_invariant(scores, scale):
    n = len(scores)
    p = PolicyConfig(kind="adore", capacity=n, k=1)
    pos = np.arange(n)[::-1].copy()
    s = np.array(scores)
    assert select_victim(p, pos, s) == select_victim(p, pos, s * scale)
    v = select_victim(p, pos, s)
    assert s[v] == s.min()


def test_h2o_replay_oracle():
    """Accumulated attention drives H2O eviction; replayed by hand."""
    p = PolicyConfig(kind="h2o", capacity=3, k=1)
    cache = CacheSet.empty(1, 3, 2)
    rng = make_rng(0)
    attn = rng.dirichlet(np.ones(3), size=6)
    oracle: dict[int, float] = {}
    for t in range(6):
        row = (np.zeros(2, np.float32), np.zeros(2, np.float32))
        victim = None
        if cache.occupancy == 3:
            victim = select_victim(p, cache.positions, cache.scores)
            low = min(oracle, key=lambda q: (oracle[q], q))
            assert int(cache.positions[victim]) == low
            del oracle[low]
        evict_and_append(cache, [row], t, t, 0.0, victim)
        oracle[t] = 0.0
        w = attn[t, :cache.occupancy]
        cache.add_attention(w)
        for pos, x in zip(cache.positions.tolist(), w):
            oracle[pos] += float(x)
        assert np.allclose([oracle[q] for q in cache.positions.tolist()], cache.scores)


# ----------------------------------------------------------------- cache


def _rows(n_layers, d, seed):
    rng = make_rng(seed)
    return [(rng.normal(size=d).astype(np.float32), rng.normal(size=d).astype(np.float32))
            for _ in range(n_layers)]


def test_evict_and_append_examples():
    cache = CacheSet.empty(2, 2, 3)
    assert evict_and_append(cache, _rows(2, 3, 0), 0, 10, 0.5, None) is None
    evict_and_append(cache, _rows(2, 3, 1), 1, 11, 0.7, None)
    with pytest.raises(ContractViolation):
        evict_and_append(cache, _rows(2, 3, 2), 2, 12, 0.1, None)
    gone = evict_and_append(cache, _rows(2, 3, 2), 2, 12, 0.1, 0)
    assert (gone.token, gone.position, gone.score) == (10, 0, 0.5)
    assert list(cache.positions) == [1, 2]
    assert list(cache.token_ids) == [11, 12]
    cache.check_uniform()


def test_duplicate_position_rejected():
    cache = CacheSet.empty(1, 4, 2)
    cache.append(_rows(1, 2, 0), 3, 1)
    with pytest.raises(ContractViolation):
        cache.append(_rows(1, 2, 1), 3, 1)
    with pytest.raises(DimensionError):
        cache.append(_rows(2, 2, 1), 4, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 12), st.integers(1, 4), st.integers(20, 80))
def test_sink_keeps_first_tokens(capacity, n_sink, steps):
    p = PolicyConfig(kind="sink", capacity=capacity, k=1, n_sink=n_sink)
    cache = CacheSet.empty(1, capacity, 2)
    rows = _rows(1, 2, 0)
    for t in range(steps):
        victim = select_victim(p, cache.positions, None) if cache.occupancy == capacity else None
        evict_and_append(cache, rows, t, 0, 0.0, victim)
        assert cache.occupancy <= capacity
        kept = set(cache.positions.tolist())
        assert set(range(min(n_sink, t + 1))) <= kept
        recent = range(max(0, t + 1 - (capacity - n_sink)), t + 1)
        assert set(recent) <= kept


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 999))
def test_matmul_and_gather_caches_agree(seed):
    rng = make_rng(seed)
    a = CacheSet.empty(2, 5, 4)
    b = CacheSet.empty(2, 5, 4)
    for t in range(15):
        rows = _rows(2, 4, seed * 100 + t)
        v = int(rng.integers(0, 5)) if a.occupancy == 5 else None
        evict_and_append(a, rows, t, t, 0.0, v, "matmul")
        evict_and_append(b, rows, t, t, 0.0, v, "gather")
    for la, lb in zip(a.layers, b.layers):
        assert la.keys.tobytes() == lb.keys.tobytes()
        assert la.values.tobytes() == lb.values.tobytes()

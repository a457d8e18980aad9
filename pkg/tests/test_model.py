import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adore.errors import CapacityError, ConfigError, ContractViolation, DimensionError, NumericError
from adore.model.batched import backward_batch, cross_entropy, forward_batch, topk_keep_mask, causal_mask
from adore.model.config import ModelConfig
from adore.model.forward import ListContext, attention_step, embed, forward_step, incremental_logits
from adore.model.params import TransformerParams
from adore.model.traces import (TraceRecord, collect_traces, half_k, records_from_attention,
                                top_indices, uniform_set)
from adore.model.train import TrainConfig, evaluate_loss, topk_masked_train
from adore.numkernel import make_rng, softmax_row

SMALL = ModelConfig(n_layers=2, d_model=16, n_heads=2, max_position=128, train_context=32)


@pytest.fixture(scope="module")
def small_params():
    return TransformerParams.init(SMALL, make_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab=100)
    assert ModelConfig().head_dim == 16


def test_params_shape_validation(small_params):
    bad = dict(small_params.tensors)
    bad["head"] = np.zeros((3, 3), np.float32)
    with pytest.raises(DimensionError):
        TransformerParams(SMALL, bad)
    broken = small_params.copy()
    broken.tensors["lnf_g"][0] = np.nan
    with pytest.raises(NumericError):
        broken.check_finite()


# ---------------------------------------------------------------- embed


def test_embed_examples(small_params):
    assert embed(small_params, []).shape == (0, SMALL.d_model)
    zero = TransformerParams.zeros(SMALL)
    assert not embed(zero, [7]).any()
    rows = embed(small_params, [9, 9])
    assert np.allclose(rows[1] - rows[0],
                       small_params["pos_emb"][1] - small_params["pos_emb"][0], atol=1e-7)
    with pytest.raises(CapacityError):
        embed(small_params, [1], [SMALL.max_position])
    with pytest.raises(DimensionError):
        embed(small_params, [256])


# ------------------------------------------------------------- attention


def test_attention_step_examples():
    rng = make_rng(2)
    q = rng.normal(size=4).astype(np.float32)
    v = rng.normal(size=(1, 4)).astype(np.float32)
    assert np.array_equal(attention_step(q, rng.normal(size=(1, 4)).astype(np.float32), v, 4), v[0])
    k = np.tile(rng.normal(size=(1, 4)).astype(np.float32), (2, 1))
    v2 = rng.normal(size=(2, 4)).astype(np.float32)
    assert np.allclose(attention_step(q, k, v2, 4), (v2[0] + v2[1]) / 2, atol=1e-7)
    with pytest.raises(ContractViolation):
        attention_step(q, np.zeros((0, 4)), np.zeros((0, 4)), 4)


def test_attention_step_matches_two_pass_oracle():
    rng = make_rng(3)
    q = rng.normal(size=8)
    k = rng.normal(size=(6, 8))
    v = rng.normal(size=(6, 8))
    scores = [sum(q[j] * k[i, j] for j in range(8)) / math.sqrt(8) for i in range(6)]
    top = max(scores)
    w = [math.exp(s - top) for s in scores]
    w = [x / sum(w) for x in w]
    ref = [sum(w[i] * v[i, j] for i in range(6)) for j in range(8)]
    assert np.allclose(attention_step(q.astype(np.float32), k.astype(np.float32),
                                      v.astype(np.float32), 8), ref, atol=1e-6)


# -------------------------------------------------------------- forwards


def test_incremental_matches_batched(small_params):
    tokens = make_rng(4).integers(0, 256, 40)
    batched = forward_batch(small_params, tokens[None, :]).logits[0]
    inc = incremental_logits(small_params, tokens)
    assert np.max(np.abs(batched - inc)) <= 1e-5


def test_incremental_matches_batched_with_offset(small_params):
    tokens = make_rng(5).integers(0, 256, 20)
    pos = np.arange(50, 70)[None, :]
    batched = forward_batch(small_params, tokens[None, :], pos).logits[0]
    assert np.max(np.abs(batched - incremental_logits(small_params, tokens, 50))) <= 1e-5


def test_zero_params_give_uniform_distribution():
    zero = TransformerParams.zeros(SMALL)
    ctxs = [ListContext.empty(SMALL.d_model) for _ in range(SMALL.n_layers)]
    res = forward_step(zero, 3, 0, ctxs)
    assert np.allclose(softmax_row(res.logits), 1 / 256, atol=0)


def test_forward_step_rejects_future_cache(small_params):
    ctxs = [ListContext.empty(SMALL.d_model) for _ in range(SMALL.n_layers)]
    for c in ctxs:
        c.append(np.zeros(SMALL.d_model), np.zeros(SMALL.d_model), 5)
    with pytest.raises(ContractViolation):
        forward_step(small_params, 1, 5, ctxs)
    with pytest.raises(DimensionError):
        forward_step(small_params, 1, 6, ctxs[:1])


def test_permuting_cache_rows_leaves_output_unchanged(small_params):
    rng = make_rng(6)
    tokens = rng.integers(0, 256, 12)
    tape = forward_batch(small_params, tokens[None, :11])
    ctxs = []
    perm = rng.permutation(11)
    for lt in tape.layers:
        k = lt.k[0].transpose(1, 0, 2).reshape(11, -1)
        v = lt.v[0].transpose(1, 0, 2).reshape(11, -1)
        ctxs.append((k, v))
    plain = forward_step(small_params, int(tokens[11]), 11,
                         [ListContext(k, v, np.arange(11)) for k, v in ctxs])
    shuffled = forward_step(small_params, int(tokens[11]), 11,
                            [ListContext(k[perm], v[perm], perm.copy()) for k, v in ctxs])
    assert np.max(np.abs(plain.logits - shuffled.logits)) <= 1e-6


# ------------------------------------------------------------ top-K mask


def test_topk_mask_keeps_diagonal_and_k_entries():
    rng = make_rng(8)
    s = rng.normal(size=(1, 1, 10, 10))
    keep = topk_keep_mask(s, causal_mask(10), 3)
    for i in range(10):
        row = keep[0, 0, i]
        assert row[i]
        assert not row[i + 1:].any()
        assert row.sum() in (min(3, i + 1), min(3, i + 1) + 1)
    assert np.array_equal(topk_keep_mask(s, causal_mask(10), 10), np.broadcast_to(causal_mask(10), s.shape))


# ------------------------------------------------------------- training


def _corpus(n=600, seed=0):
    rng = make_rng(seed)
    return [rng.integers(97, 101, 17) for _ in range(n // 17)]


def test_topk_at_context_length_reproduces_full_training():
    chunks = _corpus()
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-2, seed=3, position_jitter=8)
    full = topk_masked_train(chunks, SMALL, None, cfg)
    masked = topk_masked_train(chunks, SMALL, 16, cfg)
    assert full.step_losses == masked.step_losses
    for name in full.params.tensors:
        assert np.array_equal(full.params[name], masked.params[name])


def test_single_token_sequences_loss():
    chunks = [np.array([5, 9]), np.array([5, 7])]
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=1, position_jitter=0, max_steps=1)
    init = TransformerParams.init(SMALL, make_rng(11))
    res = topk_masked_train(chunks, SMALL, 1, cfg, init=init)
    expected = 0.0
    for c in chunks:
        lg = incremental_logits(init, c[:1])[0].astype(np.float64)
        expected += -(lg[c[1]] - lg.max() - math.log(np.exp(lg - lg.max()).sum()))
    assert res.step_losses[0] == pytest.approx(expected / 2, rel=1e-5)


def test_training_reduces_loss():
    chunks = _corpus(1200)
    res = topk_masked_train(chunks, SMALL, 4, TrainConfig(epochs=4, batch_size=8, lr=1e-2, position_jitter=16))
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert evaluate_loss(res.params, chunks, 4) < math.log(256)


def test_training_rejects_empty_corpus():
    with pytest.raises(ConfigError):
        topk_masked_train([np.array([1])], SMALL, 4)


def test_non_finite_loss_reports_step():
    init = TransformerParams.init(SMALL, make_rng(0))
    init.tensors["head"][:] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        topk_masked_train(_corpus(), SMALL, None, TrainConfig(epochs=1), init=init)


def test_transformer_gradients_match_finite_differences():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, max_position=16, train_context=8)
    params = TransformerParams.init(cfg, make_rng(1)).astype(np.float64)
    for name in params.tensors:
        params.tensors[name] += make_rng(hash(name) % 1000).normal(0, 0.3, params[name].shape)
    batch = make_rng(2).integers(0, 256, (2, 6))

    def loss():
        return cross_entropy(forward_batch(params, batch[:, :-1], topk=3).logits, batch[:, 1:])[0]

    tape = forward_batch(params, batch[:, :-1], topk=3)
    _, dlogits = cross_entropy(tape.logits, batch[:, 1:])
    grads = backward_batch(params, tape, dlogits)
    eps = 1e-3
    for name in [n for n in params.tensors if n.startswith("layers.0.")]:
        t = params.tensors[name]
        num = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + eps
            up = loss()
            t[idx] = old - eps
            down = loss()
            t[idx] = old
            num[idx] = (up - down) / (2 * eps)
        err = np.max(np.abs(num - grads[name])) / max(1e-8, np.max(np.abs(num)))
        assert err <= 1e-3, name


# ---------------------------------------------------------------- traces


def test_half_k_rounds_up():
    assert half_k(16) == 8 and half_k(5) == 3


def test_top_indices_breaks_ties_to_recent():
    assert list(top_indices(np.array([0.5, 0.5, 0.1, 0.5]), 2)) == [1, 3]


def test_uniform_set_identical_layers():
    s = np.array([1, 4, 6])
    assert list(uniform_set([s, s], 8, 3)) == [1, 4, 6]


def test_uniform_set_three_layer_toy():
    sets = [np.array([1, 2]), np.array([2, 3]), np.array([2, 4])]
    # equal weights: the tie among 1, 3, 4 goes to the most recent
    assert list(uniform_set(sets, 5, 2)) == [2, 4]
    weights = [np.array([0.9, 0.3]), np.array([0.3, 0.2]), np.array([0.3, 0.1])]
    assert list(uniform_set(sets, 5, 2, weights)) == [1, 2]


def test_records_cover_all_past_positions_when_short():
    rng = make_rng(0)
    attn = []
    for _ in range(2):
        a = np.tril(rng.random((2, 10, 10)))
        attn.append(a / a.sum(-1, keepdims=True))
    recs = records_from_attention(attn, list(range(10)), k=4)
    for r in recs:
        assert len(r.uniform) == min(4, r.step)
        assert all(len(s) == min(2, r.step) for s in r.layer_sets)
        assert np.all(r.uniform < max(r.step, 1))
    assert list(recs[3].uniform) == [0, 1, 2]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_collected_traces_are_valid(seed):
    params = TransformerParams.init(SMALL, make_rng(seed))
    seq = make_rng(seed + 1).integers(0, 256, 24)
    (recs,) = list(collect_traces(params, [seq], 6))
    assert [r.step for r in recs] == list(range(24))
    for r in recs:
        assert isinstance(r, TraceRecord)
        assert len(r.uniform) == min(6, r.step)
        assert len(set(r.uniform.tolist())) == len(r.uniform)
        for s in r.layer_sets:
            assert np.all(s < r.step) and len(s) == min(3, r.step)
        assert r.token == seq[r.step]

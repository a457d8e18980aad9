"""Teacher-forced full-sequence forward and backward passes.

Shapes: ``B`` sequences of ``T`` tokens, ``H`` heads of width ``hd``.
Attention tensors are laid out ``(B, H, T, T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numkernel import matmul, softmax
from .layers import gelu_forward, gelu_grad, layer_norm_backward, layer_norm_forward
from .params import TransformerParams


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def topk_keep_mask(scores: np.ndarray, allowed: np.ndarray, k: int | None) -> np.ndarray:
    """Keep mask restricting each attention row to its ``k`` largest allowed scores.

    The diagonal (a token attending to itself) is always kept.  ``k=None`` or a
    ``k`` no smaller than the row length keeps every allowed entry.
    """
    t = scores.shape[-1]
    if k is None or k >= t:
        return np.broadcast_to(allowed, scores.shape)
    masked = np.where(allowed, scores, -np.inf)
    kth = np.partition(masked, t - k, axis=-1)[..., t - k:t - k + 1]
    keep = allowed & (masked >= kth)
    return keep | np.eye(t, dtype=bool)


@dataclass
class LayerTape:
    ln1: tuple
    h1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    o: np.ndarray
    ln2: tuple
    h2: np.ndarray
    u: np.ndarray
    gu: np.ndarray
    gt: np.ndarray


@dataclass
class ForwardTape:
    tokens: np.ndarray
    positions: np.ndarray
    layers: list[LayerTape] = field(default_factory=list)
    lnf: tuple | None = None
    hf: np.ndarray | None = None
    logits: np.ndarray | None = None


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def forward_batch(params: TransformerParams, tokens: np.ndarray,
                  positions: np.ndarray | None = None, topk: int | None = None) -> ForwardTape:
    """Causal forward over whole sequences, recording everything backward needs.

    ``positions`` defaults to ``0..T-1`` for every row.  ``topk`` applies the
    per-head top-K attention mask used for sparse-aligned training.
    """
    cfg = params.config
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, t = tokens.shape
    if positions is None:
        positions = np.broadcast_to(np.arange(t), (b, t))
    positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
    tape = ForwardTape(tokens, positions)
    x = params["tok_emb"][tokens] + params["pos_emb"][positions]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    allowed = causal_mask(t)
    for i in range(cfg.n_layers):
        w = params.layer(i)
        h1, ln1 = layer_norm_forward(x, w["ln1_g"], w["ln1_b"])
        q = _split_heads(matmul(h1, w["w_q"]), cfg.n_heads)
        k = _split_heads(matmul(h1, w["w_k"]), cfg.n_heads)
        v = _split_heads(matmul(h1, w["w_v"]), cfg.n_heads)
        s = matmul(q, k.transpose(0, 1, 3, 2)) * scale
        keep = topk_keep_mask(s, allowed, topk)
        p = softmax(np.where(keep, s, -np.inf))
        o = _merge_heads(matmul(p, v))
        x = x + matmul(o, w["w_o"])
        h2, ln2 = layer_norm_forward(x, w["ln2_g"], w["ln2_b"])
        u = matmul(h2, w["w_1"]) + w["b_1"]
        gu, gt = gelu_forward(u)
        x = x + matmul(gu, w["w_2"]) + w["b_2"]
        tape.layers.append(LayerTape(ln1, h1, q, k, v, p, o, ln2, h2, u, gu, gt))
    hf, tape.lnf = layer_norm_forward(x, params["lnf_g"], params["lnf_b"])
    tape.hf = hf
    tape.logits = matmul(hf, params["head"])
    return tape


def layer_kv(tape: ForwardTape, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer key and value rows ``(B, T, d)`` of a recorded forward."""
    lt = tape.layers[layer]
    return _merge_heads(lt.k), _merge_heads(lt.v)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross entropy and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(-1, keepdims=True))
    logp = shifted - logz
    flat = logp.reshape(-1, logp.shape[-1])
    tgt = targets.reshape(-1)
    n = tgt.size
    loss = float(-flat[np.arange(n), tgt].sum() / n)
    dlogits = np.exp(logp)
    dflat = dlogits.reshape(-1, logp.shape[-1])
    dflat[np.arange(n), tgt] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype, copy=False)


def backward_batch(params: TransformerParams, tape: ForwardTape,
                   dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter given ``dL/dlogits``."""
    cfg = params.config
    scale = 1.0 / math.sqrt(cfg.head_dim)
    grads: dict[str, np.ndarray] = {}
    d = cfg.d_model
    grads["head"] = tape.hf.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab)
    dhf = dlogits @ params["head"].T
    dx, grads["lnf_g"], grads["lnf_b"] = layer_norm_backward(dhf, tape.lnf)
    for i in reversed(range(cfg.n_layers)):
        w = params.layer(i)
        lt = tape.layers[i]
        pre = f"layers.{i}."
        # feed-forward
        grads[pre + "w_2"] = lt.gu.reshape(-1, 4 * d).T @ dx.reshape(-1, d)
        grads[pre + "b_2"] = dx.reshape(-1, d).sum(0)
        du = (dx @ w["w_2"].T) * gelu_grad(lt.u, lt.gt)
        grads[pre + "w_1"] = lt.h2.reshape(-1, d).T @ du.reshape(-1, 4 * d)
        grads[pre + "b_1"] = du.reshape(-1, 4 * d).sum(0)
        dh2 = du @ w["w_1"].T
        dln, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = layer_norm_backward(dh2, lt.ln2)
        dx = dx + dln
        # attention
        grads[pre + "w_o"] = lt.o.reshape(-1, d).T @ dx.reshape(-1, d)
        do = _split_heads(dx @ w["w_o"].T, cfg.n_heads)
        dp = do @ lt.v.transpose(0, 1, 3, 2)
        dv = lt.p.transpose(0, 1, 3, 2) @ do
        ds = lt.p * (dp - (dp * lt.p).sum(-1, keepdims=True)) * scale
        dq = ds @ lt.k
        dk = ds.transpose(0, 1, 3, 2) @ lt.q
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        h1 = lt.h1.reshape(-1, d)
        grads[pre + "w_q"] = h1.T @ dq.reshape(-1, d)
        grads[pre + "w_k"] = h1.T @ dk.reshape(-1, d)
        grads[pre + "w_v"] = h1.T @ dv.reshape(-1, d)
        dh1 = dq @ w["w_q"].T + dk @ w["w_k"].T + dv @ w["w_v"].T
        dln, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = layer_norm_backward(dh1, lt.ln1)
        dx = dx + dln
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, tape.tokens.reshape(-1), dx.reshape(-1, d))
    dpos = np.zeros_like(params["pos_emb"])
    np.add.at(dpos, tape.positions.reshape(-1), dx.reshape(-1, d))
    grads["tok_emb"] = dtok
    grads["pos_emb"] = dpos
    return grads

"""Incremental (one step at a time) forward passes against a KV context."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from ..errors import CapacityError, ContractViolation, DimensionError
from ..numkernel import matmul, softmax, softmax_row
from .layers import gelu, layer_norm
from .params import TransformerParams


class KvContext(Protocol):
    keys: np.ndarray       # (n, d)
    values: np.ndarray     # (n, d)
    positions: np.ndarray  # (n,) original absolute positions


@dataclass
class RowsResult:
    logits: np.ndarray                       # (vocab,) for the last row
    new_kv: list[tuple[np.ndarray, np.ndarray]]  # per layer, (rows, d) each
    attn: list[np.ndarray]                   # per layer, (H, rows, n_ctx + rows)
    hidden: list[np.ndarray]                 # per layer, residual stream of the last row


def embed(params: TransformerParams, tokens: Sequence[int],
          positions: Sequence[int] | None = None) -> np.ndarray:
    """Token embedding plus learned absolute position embedding, one row per token."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if positions is None:
        positions = np.arange(tokens.size)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        return np.zeros((0, cfg.d_model), dtype=params["tok_emb"].dtype)
    if positions.shape != tokens.shape:
        raise DimensionError("one position per token required")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab):
        raise DimensionError("token id outside vocabulary")
    if np.any(positions >= cfg.max_position):
        raise CapacityError(f"position {int(positions.max())} >= max_position {cfg.max_position}")
    return params["tok_emb"][tokens] + params["pos_emb"][positions]


def attention_step(q: np.ndarray, k_ctx: np.ndarray, v_ctx: np.ndarray, d: int) -> np.ndarray:
    """Single-head scaled dot-product attention of one query over a context."""
    if k_ctx.shape[0] == 0:
        raise ContractViolation("attention needs a non-empty context")
    if k_ctx.shape[0] != v_ctx.shape[0]:
        raise DimensionError("key and value contexts differ in length")
    w = softmax_row(matmul(k_ctx, q) / math.sqrt(d))
    return matmul(w, v_ctx)


def forward_rows(params: TransformerParams, tokens: Sequence[int], positions: Sequence[int],
                 contexts: Sequence[KvContext]) -> RowsResult:
    """Forward a small batch of tokens against per-layer cached K/V.

    Each row's query attends to cached rows and to the batch's own fresh K/V
    rows whose original position is not after its own.  Logits come from the
    last row, which is expected to be the current token.
    """
    cfg = params.config
    if len(contexts) != cfg.n_layers:
        raise DimensionError(f"need {cfg.n_layers} layer contexts, got {len(contexts)}")
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    x = embed(params, tokens, positions)
    rows = x.shape[0]
    if rows == 0:
        raise ContractViolation("forward needs at least the current token")
    ctx_pos = np.concatenate([np.asarray(contexts[0].positions, dtype=np.int64), positions])
    visible = ctx_pos[None, :] <= positions[:, None]
    mask = None if visible.all() else visible
    scale = 1.0 / math.sqrt(cfg.head_dim)
    h_, hd = cfg.n_heads, cfg.head_dim
    new_kv, attn, hidden = [], [], []
    for i in range(cfg.n_layers):
        w = params.layer(i)
        ctx = contexts[i]
        h = layer_norm(x, w["ln1_g"], w["ln1_b"])
        q = matmul(h, w["w_q"])
        k = matmul(h, w["w_k"])
        v = matmul(h, w["w_v"])
        keys = np.concatenate([ctx.keys, k]) if len(ctx.keys) else k
        values = np.concatenate([ctx.values, v]) if len(ctx.values) else v
        n = keys.shape[0]
        qh = q.reshape(rows, h_, hd).transpose(1, 0, 2)
        kh = keys.reshape(n, h_, hd).transpose(1, 2, 0)
        vh = values.reshape(n, h_, hd).transpose(1, 0, 2)
        s = matmul(qh, kh) * scale
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        p = softmax(s)
        o = matmul(p, vh).transpose(1, 0, 2).reshape(rows, cfg.d_model)
        x = x + matmul(o, w["w_o"])
        h2 = layer_norm(x, w["ln2_g"], w["ln2_b"])
        x = x + matmul(gelu(matmul(h2, w["w_1"]) + w["b_1"]), w["w_2"]) + w["b_2"]
        new_kv.append((k, v))
        attn.append(p)
        hidden.append(x[-1])
    hf = layer_norm(x[-1], params["lnf_g"], params["lnf_b"])
    logits = matmul(hf, params["head"])
    return RowsResult(logits, new_kv, attn, hidden)


def forward_step(params: TransformerParams, token: int, position: int,
                 contexts: Sequence[KvContext]) -> RowsResult:
    """Next-token logits for one token attending over ``contexts`` plus itself."""
    for ctx in contexts:
        if len(ctx.positions) and np.max(ctx.positions) >= position:
            raise ContractViolation("cached positions must precede the current token")
    return forward_rows(params, [token], [position], contexts)


@dataclass
class ListContext:
    """Minimal growable per-layer context used by reference decoders."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    @classmethod
    def empty(cls, d: int, dtype=np.float32) -> "ListContext":
        return cls(np.zeros((0, d), dtype), np.zeros((0, d), dtype), np.zeros(0, np.int64))

    def append(self, k: np.ndarray, v: np.ndarray, position: int) -> None:
        self.keys = np.concatenate([self.keys, k.reshape(1, -1)])
        self.values = np.concatenate([self.values, v.reshape(1, -1)])
        self.positions = np.append(self.positions, position)


def incremental_logits(params: TransformerParams, tokens: Sequence[int],
                       start_position: int = 0) -> np.ndarray:
    """Logits at every position computed step by step with an unbounded cache."""
    cfg = params.config
    dtype = params["tok_emb"].dtype
    ctxs = [ListContext.empty(cfg.d_model, dtype) for _ in range(cfg.n_layers)]
    out = []
    for j, tok in enumerate(tokens):
        pos = start_position + j
        res = forward_step(params, int(tok), pos, ctxs)
        for ctx, (k, v) in zip(ctxs, res.new_kv):
            ctx.append(k[0], v[0], pos)
        out.append(res.logits)
    return np.stack(out) if out else np.zeros((0, cfg.vocab), dtype)

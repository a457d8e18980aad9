"""Attention-trace collection: per-layer top sets and the cross-layer uniform set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .batched import forward_batch
from .params import TransformerParams


def half_k(k: int) -> int:
    return math.ceil(k / 2)


@dataclass
class TraceRecord:
    """Attention summary for the query at position ``step`` of one sequence.

    ``layer_sets`` hold, per layer, the sorted indices of the top-``ceil(K/2)``
    past positions; ``uniform`` the ``min(K, step)`` past positions that occur
    most often across those sets.  ``layer_weights`` (aligned with
    ``layer_sets``) keep the attention weights for tie-breaking; they are not
    part of the on-disk format.
    """

    step: int
    layer_sets: list[np.ndarray]
    uniform: np.ndarray
    token: int
    layer_weights: list[np.ndarray] | None = field(default=None, compare=False)


def head_max_attention(p_row: np.ndarray) -> np.ndarray:
    """Collapse per-head attention rows ``(H, n)`` to one row by taking the max over heads."""
    return p_row.max(axis=0)


def top_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest weights (ties -> more recent)."""
    n = weights.shape[0]
    if k >= n:
        return np.arange(n)
    order = np.lexsort((-np.arange(n), -weights))
    return np.sort(order[:k])


def rank_by_frequency(counts: np.ndarray, attn_sum: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` highest counts; ties -> larger attention sum, then recency."""
    n = counts.shape[0]
    if k >= n:
        return np.arange(n)
    order = np.lexsort((-np.arange(n), -attn_sum, -counts))
    return np.sort(order[:k])


def uniform_set(layer_sets: Sequence[np.ndarray], n: int, k: int,
                layer_weights: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Cross-layer aggregation of per-layer top sets over ``n`` candidate positions."""
    counts = np.zeros(n)
    attn = np.zeros(n)
    for i, s in enumerate(layer_sets):
        counts[s] += 1
        if layer_weights is not None:
            attn[s] += layer_weights[i]
    return rank_by_frequency(counts, attn, min(k, n))


def records_from_attention(attn: Sequence[np.ndarray], tokens: Sequence[int], k: int,
                           start: int = 0) -> list[TraceRecord]:
    """Trace records from per-layer attention tensors ``(H, T, T)`` of one sequence."""
    kh = half_k(k)
    t = len(tokens)
    out = []
    for n in range(start, t):
        sets, weights = [], []
        for p in attn:
            row = head_max_attention(p[:, n, :n])
            s = top_indices(row, min(kh, n))
            sets.append(s)
            weights.append(row[s])
        uni = uniform_set(sets, n, k, weights)
        out.append(TraceRecord(n, sets, uni, int(tokens[n]), weights))
    return out


def collect_traces(params: TransformerParams, sequences: Sequence[Sequence[int]],
                   k: int) -> Iterator[list[TraceRecord]]:
    """Yield, per sequence, one :class:`TraceRecord` per position (full attention)."""
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        tape = forward_batch(params, seq[None, :])
        attn = [lt.p[0] for lt in tape.layers]
        yield records_from_attention(attn, seq, k)

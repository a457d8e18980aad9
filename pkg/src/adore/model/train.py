"""Teacher-forced language-model training with optional top-K attention masking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, NumericError
from ..numkernel import Adam, make_rng
from .batched import backward_batch, cross_entropy, forward_batch
from .config import ModelConfig
from .params import TransformerParams

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 3e-3
    decay_rate: float = 0.98
    decay_every: int = 40
    seed: int = 0
    # sequences start at a random absolute offset in [0, position_jitter] so
    # position rows beyond train_context receive training signal
    position_jitter: int = 768
    max_steps: int | None = None


@dataclass
class TrainResult:
    params: TransformerParams
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _batches(chunks: Sequence[np.ndarray], batch_size: int, rng: np.random.Generator):
    by_len: dict[int, list[np.ndarray]] = {}
    for c in chunks:
        if len(c) >= 2:
            by_len.setdefault(len(c), []).append(np.asarray(c, dtype=np.int64))
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        order = rng.permutation(len(group))
        for s in range(0, len(group), batch_size):
            batches.append(np.stack([group[j] for j in order[s:s + batch_size]]))
    return [batches[j] for j in rng.permutation(len(batches))]


def _positions(batch: np.ndarray, cfg: ModelConfig, jitter: int,
               rng: np.random.Generator) -> np.ndarray:
    b, t = batch.shape
    t -= 1
    hi = min(jitter, cfg.max_position - t)
    offsets = rng.integers(0, hi + 1, size=b) if hi > 0 else np.zeros(b, np.int64)
    return offsets[:, None] + np.arange(t)[None, :]


def batch_loss_and_grads(params: TransformerParams, batch: np.ndarray,
                         positions: np.ndarray | None = None, topk: int | None = None):
    tape = forward_batch(params, batch[:, :-1], positions, topk)
    loss, dlogits = cross_entropy(tape.logits, batch[:, 1:])
    return loss, backward_batch(params, tape, dlogits)


def topk_masked_train(chunks: Sequence[np.ndarray], config: ModelConfig, k: int | None,
                      train: TrainConfig | None = None,
                      init: TransformerParams | None = None) -> TrainResult:
    """Train (or fine-tune ``init``) with attention restricted to each row's top-``k``.

    ``k=None`` is ordinary full-attention training.
    """
    train = train or TrainConfig()
    if k is not None and k < 1:
        raise ConfigError("top-K must be >= 1")
    if not any(len(c) >= 2 for c in chunks):
        raise ConfigError("corpus has no trainable chunk")
    rng = make_rng(train.seed)
    params = init.copy() if init is not None else TransformerParams.init(config, rng)
    opt = Adam(params.tensors, train.lr, train.decay_rate, train.decay_every)
    result = TrainResult(params)
    step = 0
    for epoch in range(train.epochs):
        losses = []
        for batch in _batches(chunks, train.batch_size, rng):
            pos = _positions(batch, config, train.position_jitter, rng)
            loss, grads = batch_loss_and_grads(params, batch, pos, k)
            if not np.isfinite(loss):
                raise NumericError("non-finite training loss", step=step)
            opt.step(grads)
            step += 1
            losses.append(loss)
            result.step_losses.append(loss)
            if train.max_steps is not None and step >= train.max_steps:
                break
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d  k=%s  loss %.4f  lr %.2e", epoch, k, result.epoch_losses[-1], opt.lr)
        if train.max_steps is not None and step >= train.max_steps:
            break
    return result


def evaluate_loss(params: TransformerParams, chunks: Sequence[np.ndarray],
                  topk: int | None = None, batch_size: int = 16) -> float:
    """Mean teacher-forced cross entropy (nats per byte) over ``chunks``."""
    total, count = 0.0, 0
    by_len: dict[int, list[np.ndarray]] = {}
    for c in chunks:
        if len(c) >= 2:
            by_len.setdefault(len(c), []).append(np.asarray(c, dtype=np.int64))
    for group in by_len.values():
        for s in range(0, len(group), batch_size):
            batch = np.stack(group[s:s + batch_size])
            tape = forward_batch(params, batch[:, :-1], None, topk)
            loss, _ = cross_entropy(tape.logits, batch[:, 1:])
            n = batch[:, 1:].size
            total += loss * n
            count += n
    return total / count

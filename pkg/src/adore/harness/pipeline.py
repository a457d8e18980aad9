"""The desk-scale training recipe: language model, traces, controller."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..controller import (ControllerDataset, ControllerParams, ControllerTrainConfig,
                          ControllerTrainResult, build_labels, train_controller)
from ..model.config import ModelConfig
from ..model.params import TransformerParams
from ..model.traces import TraceRecord, collect_traces
from ..model.train import TrainConfig, evaluate_loss, topk_masked_train
from ..numkernel import make_rng
from .corpus import chunk_tokens

log = logging.getLogger(__name__)


@dataclass
class DeskRecipe:
    """Everything that shapes the trained desk artifacts besides the corpus."""

    model: ModelConfig = field(default_factory=ModelConfig)
    k: int = 16
    lm_epochs: int = 12
    lm_lr: float = 4e-3
    batch_size: int = 8
    position_jitter: int = 768
    topk_epochs: int = 3
    trace_len: int = 256
    max_trace_seqs: int | None = None
    label_mode: str = "count"
    controller_hidden: int = 32
    controller_epochs: int = 30
    controller_variant: str = "uni"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.as_dict()
        return d


def train_language_model(train_tokens: np.ndarray, recipe: DeskRecipe, seed: int = 0
                         ) -> TransformerParams:
    """Full-attention pretraining followed by top-K-masked fine-tuning."""
    ctx = recipe.model.train_context
    chunks = [c for c in chunk_tokens(train_tokens, ctx + 1) if len(c) >= 2]
    base = TrainConfig(epochs=recipe.lm_epochs, batch_size=recipe.batch_size, lr=recipe.lm_lr,
                       seed=seed, position_jitter=recipe.position_jitter)
    pre = topk_masked_train(chunks, recipe.model, None, base)
    if not recipe.topk_epochs:
        return pre.params
    tune = TrainConfig(epochs=recipe.topk_epochs, batch_size=recipe.batch_size,
                       lr=recipe.lm_lr / 3, seed=seed + 1, position_jitter=recipe.position_jitter)
    return topk_masked_train(chunks, recipe.model, recipe.k, tune, init=pre.params).params


def heldout_loss(params: TransformerParams, tokens: np.ndarray, topk: int | None = None) -> float:
    ctx = params.config.train_context
    return evaluate_loss(params, [c for c in chunk_tokens(tokens, ctx + 1) if len(c) >= 2], topk)


def trace_sequences(tokens: np.ndarray, recipe: DeskRecipe) -> list[np.ndarray]:
    seqs = [c for c in chunk_tokens(tokens, recipe.trace_len) if len(c) == recipe.trace_len]
    return seqs[:recipe.max_trace_seqs] if recipe.max_trace_seqs else seqs


def gather_traces(params: TransformerParams, sequences: Sequence[np.ndarray], k: int
                  ) -> list[list[TraceRecord]]:
    return list(collect_traces(params, sequences, k))


def sequence_tokens(records: Sequence[TraceRecord]) -> np.ndarray:
    return np.array([r.token for r in sorted(records, key=lambda r: r.step)], dtype=np.int64)


def controller_dataset(params: TransformerParams, traces: Sequence[Sequence[TraceRecord]],
                       k: int, mode: str = "count") -> ControllerDataset:
    """Token-embedding inputs and keep-labels, one row per traced sequence."""
    xs, ys, ps = [], [], []
    for recs in traces:
        toks = sequence_tokens(recs)
        xs.append(params["tok_emb"][toks])
        ys.append(build_labels(recs, k, mode))
        ps.append(np.arange(len(toks)))
    return ControllerDataset(xs, ys, ps)


def fit_controller(params: TransformerParams, data: ControllerDataset, recipe: DeskRecipe,
                   seed: int = 0) -> ControllerTrainResult:
    init = ControllerParams.init(make_rng(seed), params.config.d_model, recipe.controller_hidden,
                                 recipe.controller_variant,
                                 pos_scale=float(params.config.train_context),
                                 max_position=params.config.max_position)
    cfg = ControllerTrainConfig(epochs=recipe.controller_epochs, seed=seed, k=recipe.k)
    return train_controller(data, init, cfg)


@dataclass
class DeskArtifacts:
    lm: TransformerParams
    controller: ControllerParams
    controller_result: ControllerTrainResult
    traces: list[list[TraceRecord]]
    train_tokens: np.ndarray
    heldout_tokens: np.ndarray


def build_desk_artifacts(train_tokens: np.ndarray, heldout_tokens: np.ndarray,
                         recipe: DeskRecipe | None = None, seed: int = 0) -> DeskArtifacts:
    recipe = recipe or DeskRecipe()
    lm = train_language_model(train_tokens, recipe, seed)
    log.info("held-out loss %.4f nats/byte", heldout_loss(lm, heldout_tokens))
    traces = gather_traces(lm, trace_sequences(train_tokens, recipe), recipe.k)
    result = fit_controller(lm, controller_dataset(lm, traces, recipe.k, recipe.label_mode),
                            recipe, seed)
    return DeskArtifacts(lm, result.params, result, traces, train_tokens, heldout_tokens)

"""Lightweight recurrent scorer deciding which cached tokens to keep.

Each arriving token gets a keep-probability computed once from its embedding,
the running GRU state and its position::

    z_i     = GRU(x_i, z_{i-1})
    sigma_i = sigmoid(w_out . tanh(W_int (p_i + z_i) + b_int) + b_out)

where ``p_i`` is a learned linear projection of the scalar position.  The cache
evicts the entry with the lowest ``sigma``; released tokens with the highest
``sigma`` are candidates for rebuilding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, ContractViolation, DimensionError, NumericError
from .model.traces import TraceRecord, rank_by_frequency
from .numkernel import (FLOAT, Adam, GruCellParams, gru_cell, gru_cell_backward,
                        gru_cell_forward, make_rng, matmul, sigmoid)

log = logging.getLogger(__name__)

VARIANTS = ("uni", "bi", "mlp")
LABEL_MODES = ("count", "rate", "final")
_GRU_FIELDS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")


@dataclass
class ControllerParams:
    """Controller weights in a flat name -> array dict.

    Always present: ``pos.w``/``pos.b`` (position layer), ``int.w``/``int.b``
    (interaction layer), ``out.w``/``out.b`` (output head).  ``gru.*`` holds the
    forward GRU (``uni`` and ``bi``), ``gru_bwd.*`` the reverse GRU (``bi``),
    ``proj.*`` the token projection of the GRU-free ``mlp`` variant.
    """

    tensors: dict[str, np.ndarray]
    variant: str = "uni"
    pos_scale: float = 256.0
    max_position: int = 2048

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant {self.variant!r}")

    @property
    def hidden_dim(self) -> int:
        return self.tensors["int.w"].shape[0]

    @property
    def input_dim(self) -> int:
        if self.variant == "mlp":
            return self.tensors["proj.w"].shape[0]
        return self.tensors["gru.w_z"].shape[0]

    def gru(self, prefix: str = "gru") -> GruCellParams:
        return GruCellParams(**{f: self.tensors[f"{prefix}.{f}"] for f in _GRU_FIELDS})

    def copy(self) -> "ControllerParams":
        return ControllerParams({k: v.copy() for k, v in self.tensors.items()},
                                self.variant, self.pos_scale, self.max_position)

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int = 32,
             variant: str = "uni", pos_scale: float = 256.0, max_position: int = 2048,
             dtype=FLOAT) -> "ControllerParams":
        t: dict[str, np.ndarray] = {}
        grus = {"uni": ["gru"], "bi": ["gru", "gru_bwd"], "mlp": []}[variant]
        for prefix in grus:
            g = GruCellParams.init(rng, input_dim, hidden_dim, dtype)
            t.update({f"{prefix}.{k}": v for k, v in g.as_dict().items()})
        if variant == "mlp":
            t["proj.w"] = rng.normal(0, 1 / math.sqrt(input_dim), (input_dim, hidden_dim)).astype(dtype)
            t["proj.b"] = np.zeros(hidden_dim, dtype)
        t["pos.w"] = rng.normal(0, 1.0, hidden_dim).astype(dtype)
        t["pos.b"] = np.zeros(hidden_dim, dtype)
        t["int.w"] = rng.normal(0, 1 / math.sqrt(hidden_dim), (hidden_dim, hidden_dim)).astype(dtype)
        t["int.b"] = np.zeros(hidden_dim, dtype)
        t["out.w"] = rng.normal(0, 1 / math.sqrt(hidden_dim), hidden_dim).astype(dtype)
        t["out.b"] = np.zeros(1, dtype)
        return cls(t, variant, pos_scale, max_position)

    @classmethod
    def zeros_like(cls, other: "ControllerParams") -> "ControllerParams":
        return cls({k: np.zeros_like(v) for k, v in other.tensors.items()},
                   other.variant, other.pos_scale, other.max_position)


@dataclass
class ScoreState:
    z: np.ndarray
    sigmas: list[float] = field(default_factory=list)

    @classmethod
    def initial(cls, params: ControllerParams) -> "ScoreState":
        return cls(np.zeros(params.hidden_dim, dtype=params.tensors["int.w"].dtype))


def _head(params: ControllerParams, z: np.ndarray, positions: np.ndarray):
    """Position layer, interaction layer and sigmoid output on top of ``z``."""
    t = params.tensors
    pos = (np.asarray(positions, dtype=z.dtype) / params.pos_scale)[..., None]
    pz = pos * t["pos.w"] + t["pos.b"] + z
    a = np.tanh(matmul(pz, t["int.w"]) + t["int.b"])
    logit = matmul(a, t["out.w"]) + t["out.b"][0]
    return sigmoid(logit), (pos, pz, a, logit)


def score_token(x: np.ndarray, position: int, state: ScoreState,
                params: ControllerParams) -> tuple[float, ScoreState]:
    """Keep-probability of one arriving token; returns it with the advanced state."""
    if position >= params.max_position:
        raise CapacityError(f"position {position} >= controller max_position")
    if x.shape[-1] != params.input_dim:
        raise DimensionError("token embedding width does not match the controller")
    if params.variant == "bi":
        raise ContractViolation("the bidirectional scorer needs the whole sequence")
    if params.variant == "uni":
        z = gru_cell(x, state.z, params.gru())
    else:
        z = np.tanh(matmul(x, params.tensors["proj.w"]) + params.tensors["proj.b"])
    sigma, _ = _head(params, z, np.asarray(position))
    sigma = float(sigma)
    return sigma, ScoreState(z, state.sigmas + [sigma])


def _encode(params: ControllerParams, x: np.ndarray):
    """Context representations ``z`` for a batch ``(B, T, d)`` plus backward caches."""
    b, t, _ = x.shape
    h = params.hidden_dim
    dtype = x.dtype
    if params.variant == "mlp":
        z = np.tanh(matmul(x, params.tensors["proj.w"]) + params.tensors["proj.b"])
        return z, ("mlp", z)
    fwd = params.gru("gru")
    zs, caches = [], []
    state = np.zeros((b, h), dtype)
    for i in range(t):
        state, c = gru_cell_forward(x[:, i], state, fwd)
        zs.append(state)
        caches.append(c)
    z = np.stack(zs, axis=1)
    if params.variant == "uni":
        return z, ("uni", caches)
    bwd = params.gru("gru_bwd")
    zb, caches_b = [None] * t, [None] * t
    state = np.zeros((b, h), dtype)
    for i in reversed(range(t)):
        state, caches_b[i] = gru_cell_forward(x[:, i], state, bwd)
        zb[i] = state
    return z + np.stack(zb, axis=1), ("bi", caches, caches_b)


def score_sequence(params: ControllerParams, x: np.ndarray,
                   positions: np.ndarray | None = None) -> np.ndarray:
    """Keep-probabilities of every token of one or more whole sequences."""
    squeeze = x.ndim == 2
    x = x[None] if squeeze else x
    if positions is None:
        positions = np.arange(x.shape[1])
    z, _ = _encode(params, x)
    sigma, _ = _head(params, z, np.broadcast_to(positions, x.shape[:2]))
    return sigma[0] if squeeze else sigma


def loss_and_grads(params: ControllerParams, x: np.ndarray, labels: np.ndarray,
                   positions: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token binary cross entropy over a batch ``(B, T, d)`` and its gradients."""
    t = params.tensors
    b, n, _ = x.shape
    if positions is None:
        positions = np.arange(n)
    positions = np.broadcast_to(positions, (b, n))
    z, enc = _encode(params, x)
    sigma, (pos, pz, a, logit) = _head(params, z, positions)
    y = labels.astype(x.dtype)
    count = y.size
    # BCE from logits for numerical stability
    loss = float(np.mean(np.maximum(logit, 0) - logit * y + np.log1p(np.exp(-np.abs(logit)))))
    dlogit = (sigma - y) / count
    g: dict[str, np.ndarray] = {}
    g["out.w"] = np.einsum("bt,bth->h", dlogit, a)
    g["out.b"] = np.array([dlogit.sum()], dtype=x.dtype)
    dpre = dlogit[..., None] * t["out.w"] * (1.0 - a * a)
    g["int.w"] = pz.reshape(-1, pz.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    g["int.b"] = dpre.sum((0, 1))
    dpz = dpre @ t["int.w"].T
    g["pos.w"] = (dpz * pos).sum((0, 1))
    g["pos.b"] = dpz.sum((0, 1))
    dz = dpz
    kind = enc[0]
    if kind == "mlp":
        zz = enc[1]
        dpre_p = dz * (1.0 - zz * zz)
        g["proj.w"] = x.reshape(-1, x.shape[-1]).T @ dpre_p.reshape(-1, dpre_p.shape[-1])
        g["proj.b"] = dpre_p.sum((0, 1))
        return loss, g
    g.update(_bptt(params.gru("gru"), enc[1], dz, "gru", reverse=False))
    if kind == "bi":
        g.update(_bptt(params.gru("gru_bwd"), enc[2], dz, "gru_bwd", reverse=True))
    return loss, g


def _bptt(cell: GruCellParams, caches, dz: np.ndarray, prefix: str, reverse: bool):
    n = dz.shape[1]
    grads = {f: np.zeros_like(getattr(cell, f)) for f in _GRU_FIELDS}
    carry = np.zeros_like(dz[:, 0])
    steps = range(n) if reverse else reversed(range(n))
    for i in steps:
        _, carry, gi = gru_cell_backward(dz[:, i] + carry, caches[i], cell)
        for f in _GRU_FIELDS:
            grads[f] += gi[f]
    return {f"{prefix}.{f}": v for f, v in grads.items()}


# ------------------------------------------------------------------ labels


def build_labels(traces: Sequence[TraceRecord], k: int, mode: str = "count") -> np.ndarray:
    """Binary keep-labels for one sequence from its trace records.

    Counts how often each position appears in any layer's top-``ceil(K/2)`` set
    over all decoding steps and labels the ``min(K, length)`` most frequent
    positions 1.  Ties go to the larger summed attention weight, then to the
    more recent position.

    ``mode="rate"`` divides each count by the number of (step, layer) sets the
    position was eligible for.  ``mode="final"`` counts only the sets of the
    last step, so the positives are the uniform set of the sample's final query.
    """
    if mode not in LABEL_MODES:
        raise ConfigError(f"unknown label mode {mode!r}")
    n = max((r.step for r in traces), default=-1) + 1
    if mode == "final" and traces:
        last = max(traces, key=lambda r: r.step)
        traces = [TraceRecord(n - 1, last.layer_sets, last.uniform, last.token, last.layer_weights)]
    counts = np.zeros(n)
    attn = np.zeros(n)
    n_layers = 0
    for r in traces:
        n_layers = max(n_layers, len(r.layer_sets))
        for li, s in enumerate(r.layer_sets):
            counts[s] += 1
            if r.layer_weights is not None:
                attn[s] += r.layer_weights[li]
    if mode == "rate" and n:
        steps = np.array(sorted(r.step for r in traces))
        # sets of step s cover positions < s
        eligible = (len(steps) - np.searchsorted(steps, np.arange(n), side="right")) * n_layers
        counts = np.divide(counts, eligible, out=np.zeros(n), where=eligible > 0)
    labels = np.zeros(n, dtype=np.int8)
    labels[rank_by_frequency(counts, attn, min(k, n))] = 1
    return labels


@dataclass
class ControllerDataset:
    """Per sequence: token-embedding rows ``(T, d)``, binary labels ``(T,)`` and positions."""

    inputs: list[np.ndarray]
    labels: list[np.ndarray]
    positions: list[np.ndarray]

    def __post_init__(self) -> None:
        for x, y, p in zip(self.inputs, self.labels, self.positions):
            if not (x.shape[0] == y.shape[0] == p.shape[0]):
                raise DimensionError("inputs, labels and positions must align")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "ControllerDataset":
        return ControllerDataset([self.inputs[i] for i in idx], [self.labels[i] for i in idx],
                                 [self.positions[i] for i in idx])


def dataset_from_traces(token_embedding: np.ndarray, sequences: Sequence[np.ndarray],
                        traces: Sequence[Sequence[TraceRecord]], k: int,
                        mode: str = "count", start_position: int = 0) -> ControllerDataset:
    xs, ys, ps = [], [], []
    for seq, recs in zip(sequences, traces):
        seq = np.asarray(seq, dtype=np.int64)
        xs.append(token_embedding[seq])
        ys.append(build_labels(recs, k, mode))
        ps.append(start_position + np.arange(len(seq)))
    return ControllerDataset(xs, ys, ps)


# ---------------------------------------------------------------- training


@dataclass
class ControllerTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.005
    decay_rate: float = 0.98
    decay_every: int = 200
    val_fraction: float = 0.2
    seed: int = 0
    k: int = 16


@dataclass
class ControllerMetrics:
    accuracy: float
    f1: float
    topk_f1: float
    loss: float


@dataclass
class ControllerTrainResult:
    params: ControllerParams
    best: ControllerMetrics
    history: list[ControllerMetrics]
    best_epoch: int


def _f1(pred: np.ndarray, gold: np.ndarray) -> float:
    tp = float(np.sum(pred & gold))
    fp = float(np.sum(pred & ~gold))
    fn = float(np.sum(~pred & gold))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def evaluate_controller(params: ControllerParams, data: ControllerDataset, k: int) -> ControllerMetrics:
    """Accuracy and F1 at the 0.5 threshold, plus F1 of taking each sequence's top-``k``."""
    preds, topk_preds, golds, losses = [], [], [], []
    for x, y, p in zip(data.inputs, data.labels, data.positions):
        sig = score_sequence(params, x, p)
        gold = y.astype(bool)
        preds.append(sig >= 0.5)
        sel = np.zeros_like(gold)
        sel[np.argsort(-sig, kind="stable")[:min(k, len(sig))]] = True
        topk_preds.append(sel)
        golds.append(gold)
        s = np.clip(sig.astype(np.float64), 1e-7, 1 - 1e-7)
        losses.append(-np.mean(y * np.log(s) + (1 - y) * np.log(1 - s)))
    pred, tk, gold = map(np.concatenate, (preds, topk_preds, golds))
    return ControllerMetrics(float(np.mean(pred == gold)), _f1(pred, gold), _f1(tk, gold),
                             float(np.mean(losses)))


def split_dataset(data: ControllerDataset, val_fraction: float, seed: int):
    order = make_rng(seed).permutation(len(data))
    n_val = max(1, int(round(len(data) * val_fraction))) if len(data) > 1 else 0
    return data.subset(order[n_val:]), data.subset(order[:n_val])


def train_controller(data: ControllerDataset, params: ControllerParams,
                     cfg: ControllerTrainConfig | None = None) -> ControllerTrainResult:
    """Fit the scorer with per-token BCE; keep the parameters with the best validation F1
    (ties -> lower validation loss)."""
    cfg = cfg or ControllerTrainConfig()
    if len(data) == 0:
        raise ConfigError("controller dataset is empty")
    train, val = split_dataset(data, cfg.val_fraction, cfg.seed)
    if len(val) == 0:
        val = train
    rng = make_rng(cfg.seed + 1)
    params = params.copy()
    opt = Adam(params.tensors, cfg.lr, cfg.decay_rate, cfg.decay_every)
    best_params, best, best_epoch = params.copy(), None, -1
    history = []
    for epoch in range(cfg.epochs):
        by_len: dict[int, list[int]] = {}
        for i, x in enumerate(train.inputs):
            by_len.setdefault(x.shape[0], []).append(i)
        batches = []
        for idx in by_len.values():
            idx = [idx[j] for j in rng.permutation(len(idx))]
            batches += [idx[s:s + cfg.batch_size] for s in range(0, len(idx), cfg.batch_size)]
        for bi in rng.permutation(len(batches)):
            idx = batches[bi]
            x = np.stack([train.inputs[i] for i in idx])
            y = np.stack([train.labels[i] for i in idx])
            p = np.stack([train.positions[i] for i in idx])
            loss, grads = loss_and_grads(params, x, y, p)
            if not np.isfinite(loss):
                raise NumericError("non-finite controller loss", step=opt.step_count)
            opt.step(grads)
        m = evaluate_controller(params, val, cfg.k)
        history.append(m)
        log.info("controller epoch %d  val loss %.4f acc %.3f f1 %.3f topk-f1 %.3f",
                 epoch, m.loss, m.accuracy, m.f1, m.topk_f1)
        # equal F1 falls back to the lower validation loss
        if best is None or (m.f1, -m.loss) > (best.f1, -best.loss):
            best, best_params, best_epoch = m, params.copy(), epoch
    return ControllerTrainResult(best_params, best, history, best_epoch)


# ------------------------------------------------------------ released pool


@dataclass
class ReleasedPool:
    """Tokens evicted from the cache: id, original position and score at release."""

    tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float64))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def add(self, token: int, position: int, score: float) -> None:
        if position in self.positions:
            raise ContractViolation(f"position {position} already released")
        self.tokens = np.append(self.tokens, token)
        self.positions = np.append(self.positions, position)
        self.scores = np.append(self.scores, score)

    def take(self, positions: Sequence[int]) -> None:
        keep = ~np.isin(self.positions, np.asarray(positions, dtype=np.int64))
        self.tokens, self.positions, self.scores = (
            self.tokens[keep], self.positions[keep], self.scores[keep])


def select_rebuild(pool: ReleasedPool, r: int) -> list[tuple[int, int]]:
    """The ``min(R, |pool|)`` released tokens with the highest scores (ties -> recent),
    as ``(token, position)`` pairs in ascending position order."""
    if r < 0:
        raise ValueError("R must be >= 0")
    n = len(pool)
    if r == 0 or n == 0:
        return []
    order = np.lexsort((-pool.positions, -pool.scores))[:min(r, n)]
    order = order[np.argsort(pool.positions[order])]
    return [(int(pool.tokens[i]), int(pool.positions[i])) for i in order]

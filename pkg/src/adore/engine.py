"""Decode loop: per-step scoring, rebuild of released tokens, cache update, generation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import ControllerParams, ReleasedPool, ScoreState, score_token, select_rebuild
from .errors import ConfigError, ContractViolation
from .kvcache import CacheSet, EvictedEntry, PolicyConfig, REBUILDING_KINDS, select_victim
from .model.forward import RowsResult, forward_rows
from .model.params import TransformerParams


@dataclass
class StepTiming:
    position: int
    seconds: float
    controller_seconds: float
    occupancy: int


@dataclass
class DecodeSession:
    """State of one decoding stream under one cache policy."""

    params: TransformerParams
    policy: PolicyConfig
    controller: ControllerParams | None = None
    cache: CacheSet | None = None
    score_state: ScoreState | None = None
    pool: ReleasedPool = field(default_factory=ReleasedPool)
    n: int = 0
    tokens: list[int] = field(default_factory=list)
    timings: list[StepTiming] = field(default_factory=list)
    audit: bool = False

    def __post_init__(self) -> None:
        cfg = self.params.config
        if self.policy.kind == "adore":
            if self.controller is None:
                raise ConfigError("adore policy needs controller parameters")
            if self.controller.variant == "bi":
                raise ConfigError("the bidirectional scorer cannot drive decoding")
        if self.cache is None:
            self.cache = CacheSet.empty(cfg.n_layers, self.policy.capacity, cfg.d_model,
                                        self.params["tok_emb"].dtype)
        if self.score_state is None and self.controller is not None:
            self.score_state = ScoreState.initial(self.controller)

    @property
    def controller_seconds(self) -> float:
        return sum(t.controller_seconds for t in self.timings)

    @property
    def decode_seconds(self) -> float:
        return sum(t.seconds for t in self.timings)

    def audit_partition(self) -> None:
        """Every processed position sits in exactly one of cache and pool."""
        self.cache.check_uniform()
        cached = set(self.cache.positions.tolist())
        pooled = set(self.pool.positions.tolist())
        if cached & pooled:
            raise ContractViolation(f"positions both cached and released: {sorted(cached & pooled)}")
        if cached | pooled != set(range(self.n)):
            raise ContractViolation("cache and pool do not cover the processed positions")
        cap = self.policy.capacity
        if cap is not None and self.cache.occupancy > cap:
            raise ContractViolation("cache above capacity")


def rebuild_forward(session: DecodeSession, token: int,
                    rebuild: Sequence[tuple[int, int]] = ()) -> RowsResult:
    """Forward the released tokens in ``rebuild`` (at their original positions) jointly
    with the current token against the cache; logits come from the current token's row."""
    cached = set(session.cache.positions.tolist())
    for _, pos in rebuild:
        if pos in cached:
            raise ContractViolation(f"rebuild position {pos} is still cached")
    toks = [t for t, _ in rebuild] + [int(token)]
    poss = [p for _, p in rebuild] + [session.n]
    return forward_rows(session.params, toks, poss, session.cache.layers)


def _received_attention(res: RowsResult) -> np.ndarray:
    """Attention mass the current token puts on each context row (head-summed, layer-averaged)."""
    return np.mean([p[:, -1, :].sum(0) for p in res.attn], axis=0)


def _make_room(session: DecodeSession) -> EvictedEntry | None:
    cache = session.cache
    if cache.capacity is None or cache.occupancy < cache.capacity:
        return None
    j = select_victim(session.policy, cache.positions, cache.scores, session.n)
    entry = cache.remove(j, session.policy.slicing)
    session.pool.add(entry.token, entry.position, entry.score)
    return entry


def feed_token(session: DecodeSession, token: int) -> np.ndarray:
    """Process one input token and return the next-token logits."""
    t0 = time.perf_counter()
    policy = session.policy
    position = session.n
    ctrl_s = 0.0
    sigma = 0.0
    if policy.kind == "adore":
        c0 = time.perf_counter()
        x = session.params["tok_emb"][int(token)]
        sigma, session.score_state = score_token(x, position, session.score_state, session.controller)
        ctrl_s = time.perf_counter() - c0
    rebuild = []
    if policy.kind in REBUILDING_KINDS and policy.rebuild:
        rebuild = select_rebuild(session.pool, policy.rebuild)
    res = rebuild_forward(session, token, rebuild)
    cache = session.cache
    n_ctx = cache.occupancy
    h2o = policy.kind in ("h2o", "h2o_rebuilt")
    if h2o:
        recv = _received_attention(res)
        cache.add_attention(recv[:n_ctx])
        own = float(recv[-1])
    if rebuild and policy.insert_rebuilt:
        scores = dict(zip(session.pool.positions.tolist(), session.pool.scores.tolist()))
        session.pool.take([p for _, p in rebuild])
        for r, (tok, pos) in enumerate(rebuild):
            _make_room(session)
            # rebuilt heavy hitters restart their tally; adore keeps the arrival score
            score = 0.0 if h2o else scores[pos]
            cache.append([(k[r], v[r]) for k, v in res.new_kv], pos, tok, score)
    _make_room(session)
    score = own if h2o else sigma
    cache.append([(k[-1], v[-1]) for k, v in res.new_kv], position, int(token), score)
    session.n += 1
    session.tokens.append(int(token))
    if session.audit:
        session.audit_partition()
    session.timings.append(StepTiming(position, time.perf_counter() - t0, ctrl_s, cache.occupancy))
    return res.logits


def decode_step(session: DecodeSession, token: int) -> int:
    """Feed ``token`` and return the greedy next token."""
    return int(np.argmax(feed_token(session, token)))


@dataclass
class Generation:
    tokens: list[int]
    prompt_len: int
    timings: list[StepTiming]
    controller_seconds: float

    @property
    def new_tokens(self) -> list[int]:
        return self.tokens[self.prompt_len:]


def new_session(params: TransformerParams, policy: PolicyConfig,
                controller: ControllerParams | None = None, audit: bool = False) -> DecodeSession:
    return DecodeSession(params, policy, controller if policy.kind == "adore" else None, audit=audit)


def generate(params: TransformerParams, prompt: Sequence[int], max_new: int,
             policy: PolicyConfig, controller: ControllerParams | None = None,
             seed: int = 0, audit: bool = False) -> Generation:
    """Greedy continuation of ``prompt``.

    The timing log holds the ``max_new`` steps that produced a new token (the
    last prompt step and every fed-back generated token).

    Decoding is deterministic; ``seed`` is accepted so runs record it alongside
    their configuration.
    """
    del seed
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    session = new_session(params, policy, controller, audit)
    out = list(prompt)
    logits = None
    for tok in prompt:
        logits = feed_token(session, tok)
    first = len(session.timings) - 1
    for i in range(max_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if i + 1 < max_new:
            logits = feed_token(session, nxt)
    timings = session.timings[first:] if max_new else []
    return Generation(out, len(prompt), timings, sum(t.controller_seconds for t in timings))

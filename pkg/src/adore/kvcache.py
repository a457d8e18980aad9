"""Fixed-capacity KV storage, eviction policies and the exact top-K oracle.

All indices are 0-based.  Every layer of a :class:`CacheSet` holds the same
entries in the same order: one eviction decision is applied to all layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError
from .numkernel import FLOAT, matmul

POLICY_KINDS = ("full", "window", "strided", "sink", "h2o", "h2o_rebuilt", "adore")
REBUILDING_KINDS = ("adore", "h2o_rebuilt")


@dataclass(frozen=True)
class PolicyConfig:
    """Which cache policy to run and its sizes.

    ``capacity`` is the cache size ``m`` (``None`` only for ``full``);
    ``rebuild`` is the number ``R`` of released tokens recomputed per step.
    """

    kind: str = "adore"
    capacity: int | None = 32
    k: int = 16
    rebuild: int = 0
    stride: int = 8
    n_sink: int = 4
    slicing: str = "matmul"
    insert_rebuilt: bool = True

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.slicing not in ("matmul", "gather"):
            raise ConfigError("slicing must be 'matmul' or 'gather'")
        if self.kind == "full":
            return
        if self.capacity is None or self.capacity < 1:
            raise ConfigError(f"policy {self.kind} needs a positive capacity")
        if self.capacity < self.k:
            raise ConfigError("cache capacity m must be >= K")
        if self.rebuild < 0 or self.rebuild > self.capacity:
            raise ConfigError("rebuild count R must lie in [0, m]")
        if self.rebuild and self.kind not in REBUILDING_KINDS:
            raise ConfigError(f"policy {self.kind} does not rebuild")
        if self.kind == "sink" and self.n_sink >= self.capacity:
            raise ConfigError("sink count must leave room for a window")
        if self.kind == "strided" and self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def bounded(self) -> bool:
        return self.kind != "full"

    @property
    def sink_window(self) -> int:
        return self.capacity - self.n_sink

    @classmethod
    def make(cls, kind: str, k: int = 16, capacity: int | None = None,
             rebuild: int | None = None, **kw) -> "PolicyConfig":
        """Policy with the desk defaults: ``m = 2K`` and ``R = 4`` for rebuilding kinds."""
        if kind == "full":
            return cls(kind=kind, capacity=None, k=k, rebuild=0, **kw)
        if capacity is None:
            capacity = 2 * k
        if rebuild is None:
            rebuild = 4 if kind in REBUILDING_KINDS else 0
        return cls(kind=kind, capacity=capacity, k=k, rebuild=rebuild, **kw)

    def with_(self, **kw) -> "PolicyConfig":
        return replace(self, **kw)


# ------------------------------------------------------------------ slicing


@lru_cache(maxsize=64)
def _slicing_bank(m: int) -> np.ndarray:
    """All ``m`` slicing matrices for size ``m``, stacked as ``(m, m-1, m)``."""
    eye = np.eye(m, dtype=FLOAT)
    bank = np.stack([np.delete(eye, j, axis=0) for j in range(m)])
    bank.setflags(write=False)
    return bank


def build_slicing_matrix(j: int, m: int) -> np.ndarray:
    """The ``(m-1) x m`` identity with row ``j`` deleted (precomputed per ``m``)."""
    if m < 1 or not 0 <= j < m:
        raise IndexError(f"row {j} out of range for size {m}")
    return _slicing_bank(m)[j]


def slice_remove_row(matrix: np.ndarray, j: int) -> np.ndarray:
    """Delete row ``j`` by left-multiplying with its slicing matrix.

    Each output element is one copied value plus exact zeros, so the result is
    bit-identical to :func:`gather_remove_row`.
    """
    rows = matrix.shape[0]
    s = build_slicing_matrix(j, rows)
    if rows == 1:
        return np.zeros((0,) + matrix.shape[1:], dtype=matrix.dtype)
    return matmul(s.astype(matrix.dtype, copy=False), matrix)


def gather_remove_row(matrix: np.ndarray, j: int) -> np.ndarray:
    if not 0 <= j < matrix.shape[0]:
        raise IndexError(f"row {j} out of range for {matrix.shape[0]} rows")
    return np.delete(matrix, j, axis=0)


# ------------------------------------------------------------------- oracle


def ideal_topk_indices(q: np.ndarray, k_full: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest query-key products (ties -> smaller index)."""
    if k_full.shape[0] < 1:
        raise DimensionError("need at least one key row")
    scores = matmul(k_full, q)
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    order = np.lexsort((np.arange(n), -scores))
    return np.sort(order[:k])


# -------------------------------------------------------------------- cache


@dataclass
class LayerKvCache:
    """Keys and values of the cached entries of one layer."""

    capacity: int | None
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    token_ids: np.ndarray

    @classmethod
    def empty(cls, capacity: int | None, d: int, dtype=FLOAT) -> "LayerKvCache":
        return cls(capacity, np.zeros((0, d), dtype), np.zeros((0, d), dtype),
                   np.zeros(0, np.int64), np.zeros(0, np.int64))

    @property
    def occupancy(self) -> int:
        return self.keys.shape[0]

    def append(self, k_row: np.ndarray, v_row: np.ndarray, position: int, token: int) -> None:
        if position in self.positions:
            raise ContractViolation(f"position {position} already cached")
        self.keys = np.concatenate([self.keys, k_row.reshape(1, -1)])
        self.values = np.concatenate([self.values, v_row.reshape(1, -1)])
        self.positions = np.append(self.positions, position)
        self.token_ids = np.append(self.token_ids, token)

    def remove(self, j: int, slicing: str = "matmul") -> None:
        cut = slice_remove_row if slicing == "matmul" else gather_remove_row
        self.keys = cut(self.keys, j)
        self.values = cut(self.values, j)
        self.positions = np.delete(self.positions, j)
        self.token_ids = np.delete(self.token_ids, j)


@dataclass
class EvictedEntry:
    token: int
    position: int
    score: float


@dataclass
class CacheSet:
    """Per-layer caches sharing one entry order, plus per-entry scores.

    ``scores`` holds the controller keep-probability for ``adore`` and the
    cumulative received attention for the H2O kinds; other kinds ignore it.
    """

    layers: list[LayerKvCache]
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float64))

    @classmethod
    def empty(cls, n_layers: int, capacity: int | None, d: int, dtype=FLOAT) -> "CacheSet":
        return cls([LayerKvCache.empty(capacity, d, dtype) for _ in range(n_layers)])

    @property
    def capacity(self) -> int | None:
        return self.layers[0].capacity

    @property
    def occupancy(self) -> int:
        return self.layers[0].occupancy

    @property
    def positions(self) -> np.ndarray:
        return self.layers[0].positions

    @property
    def token_ids(self) -> np.ndarray:
        return self.layers[0].token_ids

    def check_uniform(self) -> None:
        ref = self.layers[0].positions
        for layer in self.layers[1:]:
            if not np.array_equal(layer.positions, ref):
                raise ContractViolation("layers disagree on cached positions")
        if len(set(ref.tolist())) != len(ref):
            raise ContractViolation("duplicate cached positions")
        if self.scores.shape[0] != ref.shape[0]:
            raise ContractViolation("score vector out of step with cache entries")

    def append(self, rows: list[tuple[np.ndarray, np.ndarray]], position: int, token: int,
               score: float = 0.0) -> None:
        if len(rows) != len(self.layers):
            raise DimensionError("one K/V row pair per layer required")
        for layer, (k, v) in zip(self.layers, rows):
            layer.append(k, v, position, token)
        self.scores = np.append(self.scores, score)

    def remove(self, j: int, slicing: str = "matmul") -> EvictedEntry:
        entry = EvictedEntry(int(self.token_ids[j]), int(self.positions[j]), float(self.scores[j]))
        for layer in self.layers:
            layer.remove(j, slicing)
        self.scores = np.delete(self.scores, j)
        return entry

    def add_attention(self, weights: np.ndarray) -> None:
        """Accumulate attention mass received by each cached entry."""
        self.scores = self.scores + weights


def _oldest(positions: np.ndarray, candidates: np.ndarray) -> int:
    return int(candidates[np.argmin(positions[candidates])])


def _argmin_oldest(scores: np.ndarray, positions: np.ndarray) -> int:
    return int(np.lexsort((positions, scores))[0])


def select_victim(policy: PolicyConfig, positions: np.ndarray, scores: np.ndarray | None,
                  step: int | None = None) -> int | None:
    """Index of the cached entry to evict when the cache is full.

    ``positions`` are the entries' original positions and ``scores`` the
    per-entry controller probability (``adore``) or cumulative attention
    (H2O kinds).  ``step`` is accepted for policies keyed on time; none of the
    built-in ones need it.
    """
    if policy.kind == "full":
        return None
    positions = np.asarray(positions)
    if positions.shape[0] != policy.capacity:
        raise ContractViolation(
            f"victim requested at occupancy {positions.shape[0]} != capacity {policy.capacity}")
    every = np.arange(positions.shape[0])
    if policy.kind == "window":
        return _oldest(positions, every)
    if policy.kind == "strided":
        off_grid = every[positions % policy.stride != 0]
        return _oldest(positions, off_grid if off_grid.size else every)
    if policy.kind == "sink":
        movable = every[positions >= policy.n_sink]
        return _oldest(positions, movable if movable.size else every)
    if scores is None:
        raise ContractViolation(f"policy {policy.kind} needs per-entry scores")
    return _argmin_oldest(np.asarray(scores), positions)


def evict_and_append(cache: CacheSet, rows: list[tuple[np.ndarray, np.ndarray]],
                     position: int, token: int, score: float, victim: int | None,
                     slicing: str = "matmul") -> EvictedEntry | None:
    """Remove ``victim`` from every layer (if the cache is full) and append the new entry."""
    evicted = None
    cap = cache.capacity
    if cap is not None and cache.occupancy >= cap:
        if victim is None:
            raise ContractViolation("cache is full but no victim was given")
        evicted = cache.remove(victim, slicing)
    elif victim is not None:
        evicted = cache.remove(victim, slicing)
    cache.append(rows, position, token, score)
    return evicted

"""Dense numeric kernels shared by the model, cache and controller.

Matrices and vectors are plain ``numpy`` arrays of ``float32``.  Every kernel is
a pure function: inputs are never mutated and results are fresh arrays.

Randomness comes from :func:`make_rng`, a ``numpy`` ``Generator`` over the
PCG64 bit generator (permuted congruential generator, 128-bit LCG state with an
XSL-RR output permutation) seeded from a single integer.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .errors import DimensionError, NumericError

FLOAT = np.float32

_OP_COUNTER: contextvars.ContextVar["OpCounter | None"] = contextvars.ContextVar(
    "adore_op_counter", default=None
)


class OpCounter:
    """Accumulates multiply-add counts of :func:`matmul` calls."""

    def __init__(self) -> None:
        self.ops = 0
        self.calls = 0


@contextlib.contextmanager
def count_matmul_ops() -> Iterator[OpCounter]:
    """Count matmul element operations issued inside the ``with`` block."""
    counter = OpCounter()
    token = _OP_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _OP_COUNTER.reset(token)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(data, dtype=FLOAT)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``.

    Accepts 1-D (vector) or stacked operands with ``numpy`` broadcasting
    semantics; the contracted dimensions must agree.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-D operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    counter = _OP_COUNTER.get()
    if counter is not None:
        counter.ops += int(np.prod(out.shape, dtype=np.int64)) * inner_a
        counter.calls += 1
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis``; ``-inf`` entries receive zero probability."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=FLOAT)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("softmax_row needs a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax_row input is not finite")
    return softmax(v)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


# --------------------------------------------------------------------------- GRU


@dataclass
class GruCellParams:
    """Weights of a single gated recurrent unit.

    ``w_*`` map the input (``input_dim x hidden_dim``), ``u_*`` the previous
    hidden state (``hidden_dim x hidden_dim``); ``z`` is the update gate, ``r``
    the reset gate and ``h`` the candidate.
    """

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        i, h = self.w_z.shape
        for name in ("w_z", "w_r", "w_h"):
            if getattr(self, name).shape != (i, h):
                raise DimensionError(f"{name} must be {(i, h)}")
        for name in ("u_z", "u_r", "u_h"):
            if getattr(self, name).shape != (h, h):
                raise DimensionError(f"{name} must be {(h, h)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (h,):
                raise DimensionError(f"{name} must be {(h,)}")

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[1]

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, dtype=FLOAT) -> "GruCellParams":
        w = lambda: np.zeros((input_dim, hidden_dim), dtype)  # noqa: E731
        u = lambda: np.zeros((hidden_dim, hidden_dim), dtype)  # noqa: E731
        b = lambda: np.zeros(hidden_dim, dtype)  # noqa: E731
        return cls(w(), w(), w(), u(), u(), u(), b(), b(), b())

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int,
             dtype=FLOAT) -> "GruCellParams":
        bound = 1.0 / math.sqrt(hidden_dim)

        def uni(*shape):
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        return cls(
            uni(input_dim, hidden_dim), uni(input_dim, hidden_dim), uni(input_dim, hidden_dim),
            uni(hidden_dim, hidden_dim), uni(hidden_dim, hidden_dim), uni(hidden_dim, hidden_dim),
            uni(hidden_dim), uni(hidden_dim), uni(hidden_dim),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_gru_dims(x: np.ndarray, h_prev: np.ndarray, p: GruCellParams) -> None:
    if x.shape[-1] != p.input_dim:
        raise DimensionError(f"GRU input has dim {x.shape[-1]}, expected {p.input_dim}")
    if h_prev.shape[-1] != p.hidden_dim:
        raise DimensionError(f"GRU state has dim {h_prev.shape[-1]}, expected {p.hidden_dim}")


def gru_cell(x: np.ndarray, h_prev: np.ndarray, p: GruCellParams) -> np.ndarray:
    """One GRU step; ``x`` and ``h_prev`` may carry a leading batch axis."""
    return gru_cell_forward(x, h_prev, p)[0]


def gru_cell_forward(x, h_prev, p: GruCellParams):
    """GRU step returning ``(h, cache)``; the cache feeds :func:`gru_cell_backward`.

    ``h = z * h_prev + (1 - z) * tanh(x W_h + (r * h_prev) U_h + b_h)``
    """
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    _check_gru_dims(x, h_prev, p)
    z = sigmoid(matmul(x, p.w_z) + matmul(h_prev, p.u_z) + p.b_z)
    r = sigmoid(matmul(x, p.w_r) + matmul(h_prev, p.u_r) + p.b_r)
    rh = r * h_prev
    cand = np.tanh(matmul(x, p.w_h) + matmul(rh, p.u_h) + p.b_h)
    h = z * h_prev + (1.0 - z) * cand
    return h, (x, h_prev, z, r, rh, cand)


def gru_cell_backward(dh: np.ndarray, cache, p: GruCellParams):
    """Backward pass of :func:`gru_cell_forward` for 2-D (batched) operands.

    Returns ``(dx, dh_prev, grads)`` where ``grads`` is keyed like the fields of
    :class:`GruCellParams`.
    """
    x, h_prev, z, r, rh, cand = cache
    dz = dh * (h_prev - cand)
    dcand = dh * (1.0 - z)
    dh_prev = dh * z
    da_h = dcand * (1.0 - cand * cand)
    drh = da_h @ p.u_h.T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    dh_prev = dh_prev + da_z @ p.u_z.T + da_r @ p.u_r.T
    dx = da_z @ p.w_z.T + da_r @ p.w_r.T + da_h @ p.w_h.T
    grads = {
        "w_z": x.T @ da_z, "w_r": x.T @ da_r, "w_h": x.T @ da_h,
        "u_z": h_prev.T @ da_z, "u_r": h_prev.T @ da_r, "u_h": rh.T @ da_h,
        "b_z": da_z.sum(0), "b_r": da_r.sum(0), "b_h": da_h.sum(0),
    }
    return dx, dh_prev, grads


# -------------------------------------------------------------------------- Adam

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState, step: int,
                lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                eps: float = ADAM_EPS) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. ``step`` counts from 1."""
    if params.shape != grads.shape:
        raise DimensionError(f"grad shape {grads.shape} != param shape {params.shape}")
    if step < 1:
        raise ValueError("adam step counts from 1")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient", step=step)
    dtype = params.dtype
    m = (beta1 * state.m + (1.0 - beta1) * grads).astype(dtype, copy=False)
    v = (beta2 * state.v + (1.0 - beta2) * grads * grads).astype(dtype, copy=False)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = (params - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dtype, copy=False)
    return new, AdamState(m, v)


def decayed_lr(base_lr: float, step: int, rate: float, every: int) -> float:
    """Staircase decay: ``base_lr * rate ** (step // every)``."""
    return base_lr * rate ** (step // every)


class Adam:
    """Adam over a name -> array mapping, updating the mapping in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 decay_rate: float = 1.0, decay_every: int = 1):
        self.params = params
        self.base_lr = lr
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.state = {k: AdamState.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    @property
    def lr(self) -> float:
        return decayed_lr(self.base_lr, self.step_count, self.decay_rate, self.decay_every)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.lr
        self.step_count += 1
        for name, g in grads.items():
            self.params[name], self.state[name] = adam_update(
                self.params[name], g, self.state[name], self.step_count, lr)

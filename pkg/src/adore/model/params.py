"""Parameter container for the byte-level decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericError
from ..numkernel import FLOAT
from .config import ModelConfig

LAYER_TENSORS = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                 "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2")


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, 4 * cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab, d),
        "pos_emb": (cfg.max_position, d),
    }
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "ln2_g": (d,), "ln2_b": (d,),
        "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
    }
    for i in range(cfg.n_layers):
        for name, shape in per_layer.items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["head"] = (d, cfg.vocab)
    return shapes


@dataclass
class TransformerParams:
    """Named weight tensors of the decoder plus its config.

    Tensors live in one flat dict (``tok_emb``, ``pos_emb``,
    ``layers.{i}.w_q`` ..., ``lnf_g``, ``head``) so optimizers and checkpoint
    writers can treat them uniformly.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise DimensionError(f"tensor set mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "TransformerParams":
        return TransformerParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "TransformerParams":
        return TransformerParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise NumericError(f"parameter {name} is not finite")

    @classmethod
    def zeros(cls, cfg: ModelConfig, dtype=FLOAT) -> "TransformerParams":
        return cls(cfg, {k: np.zeros(s, dtype) for k, s in tensor_shapes(cfg).items()})

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=FLOAT) -> "TransformerParams":
        std = 0.02
        resid_std = std / math.sqrt(2 * cfg.n_layers)
        tensors = {}
        for name, shape in tensor_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                t = np.ones(shape)
            elif leaf.endswith("_b") or leaf.startswith("b_"):
                t = np.zeros(shape)
            elif leaf in ("w_o", "w_2"):
                t = rng.normal(0.0, resid_std, size=shape)
            else:
                t = rng.normal(0.0, std, size=shape)
            tensors[name] = t.astype(dtype)
        return cls(cfg, tensors)

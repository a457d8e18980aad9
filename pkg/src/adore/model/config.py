from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab: int = 256
    max_position: int = 2048
    train_context: int = 256

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.vocab != 256:
            raise ConfigError("the byte tokenizer needs vocab = 256")
        if min(self.n_layers, self.d_model, self.max_position, self.train_context) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.train_context > self.max_position:
            raise ConfigError("train_context exceeds max_position")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    # field order of the checkpoint header
    FIELDS = ("n_layers", "d_model", "n_heads", "vocab", "max_position", "train_context")

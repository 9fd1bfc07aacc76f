"""Hyperparameters for the model and the trainer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

VARIANTS = ("baseline", "multi-layer", "shallow", "deep", "hard-shallow", "hard-deep", "conditional")

# refine mode used by each variant; None means attention reads the encoder states directly
REFINE_MODE = {
    "baseline": None,
    "multi-layer": None,
    "shallow": "shallow",
    "deep": "deep",
    "hard-shallow": "hard-shallow",
    "hard-deep": "hard-deep",
    "conditional": "deep",
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    variant: str = "baseline"
    d_emb: int = 32
    d_rnn: int = 64
    d_dec: int = 64
    d_att: int = 64
    d_out: int = 64
    d_re: int | None = None  # re-encoder width per direction; defaults to d_rnn
    d_policy: int = 32
    dropout: float = 0.3
    init_scale: float = 0.08
    seed: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_re is None:
            self.d_re = self.d_rnn
        for f in ("src_vocab_size", "tgt_vocab_size", "d_emb", "d_rnn", "d_dec", "d_att", "d_out", "d_re", "d_policy"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_h(self) -> int:
        return 2 * self.d_rnn

    @property
    def refine_mode(self) -> str | None:
        return REFINE_MODE[self.variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainConfig:
    lr: float = 5e-4
    clip_norm: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    max_len: int = 50
    tau_start: float = 1.0
    tau_floor: float = 0.5
    alpha: float = 0.1
    seed: int = 1
    dev_bleu_max: int = 100
    decay_after: int = 0  # epochs at full rate before the rate is scaled by lr_decay (0: never)
    lr_decay: float = 0.1

    def __post_init__(self):
        for f in ("lr", "clip_norm", "eps", "tau_start", "tau_floor", "lr_decay"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1 or self.decay_after < 0:
            raise ConfigError("batch_size and patience must be >= 1, epochs and decay_after >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

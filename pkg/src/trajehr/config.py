"""Training configuration: defaults, key=value config files, flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .cohort import TASKS
from .errors import ConfigError


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 5
    weight_decay: float = 0.01
    seed: int = 0
    lambda_anc: float = 0.05
    lambda_cov: float = 0.005
    alpha: float = 0.5
    k: int = 3
    n_layers: int = 2
    n_gat_blocks: int = 2
    hidden_dim: int = 64
    n_heads: int = 2
    max_seq_len: int = 128
    max_visits: int = 10
    task: str = "plos"
    train_frac: float = 0.70
    val_frac: float = 0.15

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("learning_rate", "batch_size", "max_epochs", "patience", "k",
                    "n_layers", "n_gat_blocks", "hidden_dim", "n_heads", "max_seq_len", "max_visits")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_anc < 0 or self.lambda_cov < 0:
            raise ConfigError("loss coefficients must be nonnegative")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not (0.0 < self.train_frac < 1.0 and 0.0 < self.val_frac < 1.0):
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.train_frac + self.val_frac >= 1.0:
            raise ConfigError("train_frac + val_frac must leave room for a test split")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **overrides) -> "TrainConfig":
        merged = self.to_dict()
        unknown = set(overrides) - set(merged)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**merged)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc


def load_config(path) -> TrainConfig:
    """Flat key=value file; '#' comments and blank lines allowed; unknown keys error."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _convert(key, raw)
    return TrainConfig(**values)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key} = {value}\n")

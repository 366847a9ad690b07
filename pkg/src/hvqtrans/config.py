"""Run configuration: nested dataclasses with a YAML round trip."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError
from .hierarchy import MODES


@dataclass
class DataConfig:
    classes: int = 3
    per_class: int = 200
    test_normal: int = 50
    test_anomalous: int = 50
    image: list[int] = field(default_factory=lambda: [128, 128])
    seed: int = 0
    root: str | None = None


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 4
    heads: int = 4
    K: int = 128
    hierarchy: str = "global"
    vq: bool = True
    switch_codebook: bool = True
    switch_expert: bool = True
    ema: bool = True
    decay: float = 0.99
    laplace_eps: float = 1e-5
    dropout: float = 0.1
    dead_code_restart: bool = False
    backbone_seed: int = 0


@dataclass
class PotConfig:
    enabled: bool = True
    # scalars, or one value per level
    epsilon: Any = 0.05
    max_iter: Any = 100
    tol: Any = 1e-6
    train_max_iter: int = 10


@dataclass
class ScoreConfig:
    lam: float = 0.1
    sigma: float = 4.0


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 0.1
    beta: Any = 0.25
    alpha: Any = 0.001
    seed: int = 0
    teacher_force_switch: bool = False

    @property
    def lr_drop_epoch(self) -> int:
        return int(round(self.epochs * self.lr_drop_fraction))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pot: PotConfig = field(default_factory=PotConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        m, t = self.model, self.train
        if m.hierarchy not in MODES:
            raise ConfigurationError(f"hierarchy must be one of {MODES}, got {m.hierarchy!r}")
        if m.dim % m.heads:
            raise ConfigurationError(f"dim {m.dim} not divisible by heads {m.heads}")
        for name, v in (("layers", m.layers), ("K", m.K), ("batch_size", t.batch_size)):
            if v < 1:
                raise ConfigurationError(f"{name} must be positive, got {v}")
        if t.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if t.learning_rate <= 0 or t.weight_decay < 0:
            raise ConfigurationError("learning rate must be positive and weight decay nonnegative")
        if self.score.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if not 0 < m.decay <= 1:
            raise ConfigurationError("decay must lie in (0, 1]")
        if any(s % 16 for s in self.data.image):
            raise ConfigurationError(f"image size {self.data.image} must be a multiple of 16")
        for name in ("epsilon", "max_iter", "tol"):
            per_layer(getattr(self.pot, name), m.layers, name)
        per_layer(t.beta, m.layers, "beta")
        per_layer(t.alpha, m.layers, "alpha")
        if any(e <= 0 for e in per_layer(self.pot.epsilon, m.layers)):
            raise ConfigurationError("epsilon must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for f in dataclasses.fields(cls):
            sub_cls = f.default_factory  # type: ignore[misc]
            parts[f.name] = _build(sub_cls, d.get(f.name) or {}, f.name)
        return cls(**parts)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def override(self, dotted: dict[str, Any]) -> "RunConfig":
        """Return a copy with ``{"model.K": 64, ...}`` applied."""
        d = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.partition(".")
            if section not in d or name not in d[section]:
                raise ConfigurationError(f"unknown config key {key!r}")
            d[section][name] = value
        return RunConfig.from_dict(d)


def _build(sub_cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(sub_cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return sub_cls(**values)


def per_layer(value, layers: int, name: str = "value") -> list:
    """Broadcast a scalar to ``layers`` entries, or check a list has that length."""
    if isinstance(value, (list, tuple)):
        if len(value) != layers:
            raise ConfigurationError(f"{name} lists {len(value)} values for {layers} levels")
        return list(value)
    return [value] * layers

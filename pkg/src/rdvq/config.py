"""Run configuration: JSON file with fixed sections; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TokenizerSection:
    num_stages: int = 4
    base_channels: int = 8
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4, 4, 4])
    latent_dim: int = 8
    scale_factors: list[int] = field(default_factory=lambda: [4, 8, 16])
    res_blocks: int = 1
    groups: int = 4
    codebook_size: int = 64
    beta: float = 0.25


@dataclass
class EntropyModelSection:
    depth: int = 2
    heads: int = 2
    model_dim: int = 32
    mlp_ratio: int = 4
    window_sides: list[int] = field(default_factory=lambda: [1, 2, 4])


@dataclass
class ScheduleSection:
    regime: str = "high"
    level: int = 0
    stage2_tau: float = 0.01


@dataclass
class CoderSection:
    precision: int = 16


@dataclass
class CorpusSection:
    kind: str = "synthetic"  # "synthetic" or "dir"
    path: str | None = None
    size: int = 2000
    image_size: int = 16
    seed: int = 0


@dataclass
class RunSection:
    batch_size: int = 16
    optimizer: str = "adam"
    clip_norm: float = 1.0
    lr_schedule: str = "constant"
    stage1_steps: int = 4000
    stage1_lr: float = 2e-3
    stage2_steps: int = 2000
    stage2_lr: float = 2e-3
    stage3_steps: int = 300
    stage3_lr: float = 3e-5
    log_every: int = 10


@dataclass
class Config:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    entropy_model: EntropyModelSection = field(default_factory=EntropyModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    coder: CoderSection = field(default_factory=CoderSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)

"""Declarative experiment configuration.

Configs are YAML mappings mirroring the nested dataclasses below.
Validation reports the dot-path of every offending key so hand-edited
sweep files fail with a precise location. The canonical-JSON hash of a
config is embedded in every output file it produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import yaml

from .corpus import CorpusConfig
from .inference import SamplingConfig
from .model import ModelConfig
from .seeding import derive_seed
from .strategies import StrategyConfig


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or invalid values, with dot-paths."""


@dataclass
class SweepConfig:
    axis: str = "lam"  # lam | overlap | horizon | motion
    lam_grid: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1, 0.5, 1.0])
    overlap_grid: list[float] = field(default_factory=lambda: [0.0, 0.5, 0.75])
    horizon_grid: list[int] = field(default_factory=lambda: [1, 2])
    motion_grid: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])

    def __post_init__(self):
        if self.axis not in ("lam", "overlap", "horizon", "motion"):
            raise ConfigError(f"sweep.axis: unknown axis {self.axis!r}")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    n_sequences: int = 64
    train_steps: int = 200
    eval_generations: int = 16
    gen_length: int = 0  # 0 means one full sequence
    out_dir: str = "runs"
    master_seed: int = 0
    emit_svg: bool = False

    def __post_init__(self):
        if self.n_sequences < 2:
            raise ConfigError("n_sequences: need at least 2")
        if self.train_steps < 1:
            raise ConfigError("train_steps: need at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def seed_for(self, *names) -> int:
        return derive_seed(self.master_seed, *names)


_SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "strategy": StrategyConfig,
    "sampling": SamplingConfig,
    "sweep": SweepConfig,
}


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"top level: expected a mapping, got {type(data).__name__}")
    top_names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_names:
            raise ConfigError(f"{key}: unknown key")
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return from_dict(data)


def dump_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", newline="\n") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)

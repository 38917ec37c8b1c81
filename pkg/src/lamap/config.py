"""Experiment configuration: nested dataclasses parsed from / serialized to JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .simulator import CsmConfig, SceneDistribution
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"config field '{field_path}': {message}")
        self.field = field_path


@dataclass
class TessellationConfig:
    n_points: int = 242
    k_neighbors: int = 6
    # grid for baseline (DAS/MUSIC) maps; None reuses the model grid
    eval_n_points: int | None = None


@dataclass
class ModelConfig:
    speed_of_sound: float = 343.0
    csm_normalization: str = "trace"
    # fixed encoder input gain; None fits it to on-grid point sources
    input_gain: float | None = None


@dataclass
class DoaeConfig:
    a_bins: int = 72
    e_bins: int = 36
    n_top: int = 18
    k: int = 3
    merge_deg: float = 15.0
    gate_deg: float | None = None
    music_sources: int = 2
    label_hop: float = 0.1
    seed: int = 0


@dataclass
class ExperimentConfig:
    geometry: str = "em32"
    # 1-based channel subset applied to the geometry, e.g. [6, 10, 22, 26]
    channels: list | None = None
    tessellation: TessellationConfig = field(default_factory=TessellationConfig)
    csm: CsmConfig = field(default_factory=CsmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    doae: DoaeConfig = field(default_factory=DoaeConfig)
    simulate: SceneDistribution = field(default_factory=SceneDistribution)
    seed: int = 0
    output_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        from .geometry import BUILTIN_GEOMETRIES

        if self.geometry not in BUILTIN_GEOMETRIES and not Path(self.geometry).exists():
            raise ConfigError("geometry", f"unknown geometry {self.geometry!r}")
        if self.tessellation.n_points < 4:
            raise ConfigError("tessellation.n_points", "must be >= 4")
        if not 1 <= self.tessellation.k_neighbors < self.tessellation.n_points:
            raise ConfigError("tessellation.k_neighbors", "must be in [1, n_points)")
        if self.csm.frames_per_csm < 1:
            raise ConfigError("csm.frames_per_csm", "must be >= 1")
        if self.csm.n_bands < 1:
            raise ConfigError("csm.n_bands", "must be >= 1")
        if self.model.csm_normalization not in ("trace", "none"):
            raise ConfigError("model.csm_normalization", "must be 'trace' or 'none'")
        if self.train.learning_rate <= 0:
            raise ConfigError("train.learning_rate", "must be positive")
        if self.train.gamma <= 0:
            raise ConfigError("train.gamma", "must be positive")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        return self


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return list(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path or "<root>", str(exc)) from exc


def to_dict(cfg) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(dataclasses.asdict(cfg))


def dumps(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return from_dict(ExperimentConfig, data).validate()


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())

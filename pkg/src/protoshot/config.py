"""Run configuration: JSON config file, flag overrides, effective-config echo.

A run is fully described by a RunConfig; every command writes the effective
configuration to its output directory so the run can be reproduced by passing
that file back through ``--config``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoders import EncoderConfig
from .errors import ConfigError
from .train import TrainConfig

SOURCES = ("manifest", "blobs", "textures", "planted")


@dataclass
class DataConfig:
    source: str = "textures"
    manifest: str | None = None
    train_manifest: str | None = None
    test_manifest: str | None = None
    root: str | None = None
    train_fraction: float = 0.9
    augment_train: bool = False
    target_size: int = 64
    channels: int = 1
    crop_top_fraction: float = 0.0
    luss_filter: bool = False
    luss_normal_scores: list = field(default_factory=lambda: [0])
    luss_covid_scores: list = field(default_factory=lambda: [2, 3])
    positive_class: str = "covid"
    normal_class: str = "normal"
    excluded_class: str = "other"
    negative_name: str = "negative"
    train_per_class: int = 120
    test_per_class: int = 60
    image_size: int = 64
    blob_dim: int = 8
    blob_separation: float = 5.0
    noise: float = 0.08

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown data source '{self.source}', expected one of {SOURCES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0,1), got {self.train_fraction}")


@dataclass
class EvalSettings:
    episodes: int = 200
    shots: list = field(default_factory=list)  # empty -> [train.shots]

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError(f"eval episodes must be >= 1, got {self.episodes}")


@dataclass
class ExplainSettings:
    threshold: float = 0.999
    alpha: float = 0.5
    max_images: int = 8
    episodes: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/run"
    distance: str = "squared"
    encoder_name: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    explain: ExplainSettings = field(default_factory=ExplainSettings)

    def label(self) -> str:
        return self.encoder_name or self.encoder.archetype


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "eval": EvalSettings,
    "explain": ExplainSettings,
}


def _build_section(cls, raw: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config key '{section}.{sorted(unknown)[0]}'")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def build_run_config(raw: dict) -> RunConfig:
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top_fields
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return raw


def merge_overrides(raw: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides (e.g. 'train.shots') onto a raw config dict."""
    merged = json.loads(json.dumps(raw))  # deep copy of plain JSON data
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = merged
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override '{dotted}': '{p}' is not a section")
        node[parts[-1]] = value
    return merged


def effective_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def write_effective_config(config: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective-config.json"
    path.write_text(json.dumps(effective_dict(config), indent=2) + "\n", encoding="utf-8")
    return path

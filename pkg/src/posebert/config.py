"""Versioned JSON run configuration.

A document looks like::

    {"version": 1,
     "generator": {...GeneratorConfig fields...},
     "model": {...PoseBertConfig fields...},
     "train": {...TrainConfig fields...},
     "experiment": {...bnfinetune.ExperimentConfig fields...},
     "scene": {"n": 1000, "texture_count": 100, "background_count": 100, "seed": 0}}

Every section is optional. Unknown keys and wrongly typed values raise
ConfigError naming the field path (e.g. ``train.lr``) before any work runs.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .bnfinetune import ExperimentConfig
from .errors import ConfigError
from .mocapgen import GeneratorConfig
from .model import PoseBertConfig
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass
class SceneConfig:
    n: int = 1000
    texture_count: int = 100
    background_count: int = 100
    seed: int = 0


SECTIONS = {
    "generator": GeneratorConfig,
    "model": PoseBertConfig,
    "train": TrainConfig,
    "experiment": ExperimentConfig,
    "scene": SceneConfig,
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: PoseBertConfig = field(default_factory=PoseBertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def to_dict(self):
        return {"version": self.version, **{k: dataclasses.asdict(getattr(self, k)) for k in SECTIONS}}


def _check_type(path, value, default):
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(path, f"expected a number or null, got {type(value).__name__}")
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__}")


def _build_section(name, cls, values, overrides=None):
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        _check_type(f"{name}.{key}", value, getattr(defaults, key))
    merged = {**values, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    try:
        return cls(**merged)
    except (ValueError, TypeError) as exc:
        raise ConfigError(name, str(exc)) from None


def parse_config(doc, overrides=None):
    """Validate a config mapping. ``overrides`` maps section -> {field: value};
    None values are ignored so unset CLI flags keep file values."""
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    for key in doc:
        if key != "version" and key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {version!r}, expected {CONFIG_VERSION}")
    overrides = overrides or {}
    sections = {name: _build_section(name, cls, doc.get(name, {}), overrides.get(name))
                for name, cls in SECTIONS.items()}
    return RunConfig(version=version, **sections)


def load_config(path=None, overrides=None):
    if path is None:
        return parse_config({}, overrides)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(doc, overrides)

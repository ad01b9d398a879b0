"""One experiment configuration: network, data, training, inference and
evaluation settings, read from a YAML file and patched by overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evaluation import EvalConfig
from .inference import InferenceConfig
from .model import NetworkConfig
from .synthetic import SyntheticSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "network": NetworkConfig,
    "data": SyntheticSpec,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.network.input_channels != self.data.channels:
            raise ConfigError(
                f"network.input_channels={self.network.input_channels} but data.channels={self.data.channels}"
            )

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping of sections")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(kind)}
            bad = sorted(set(values) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(bad)}")
            try:
                parts[name] = kind(**values)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{name}: {e}") from None
        try:
            return cls(**parts)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in SECTIONS}


def parse_override(text):
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} is not of the form section.key")
    section, name = key.split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from None
    return section, name, value


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then each override in turn."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for text in overrides:
        section, name, value = parse_override(text)
        sec = doc.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        sec[name] = value
    return RunConfig.from_dict(doc)

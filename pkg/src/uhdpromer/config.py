"""One YAML file drives every subcommand::

    model:
      channels: 16
      blocks: 15
    train:
      total_steps: 2000
    loss:
      alpha_sr: 0.5

Keys mirror the ModelConfig / TrainConfig / LossConfig field names exactly.
Precedence: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossConfig}


class ConfigError(ValueError):
    pass


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {sorted(SECTIONS)}")
    for name, section in raw.items():
        if section is None:
            raw[name] = {}
            continue
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section {name!r} must be a mapping")
        fields = {f.name for f in dataclasses.fields(SECTIONS[name])}
        bad = set(section) - fields
        if bad:
            raise ConfigError(f"{path}: unknown {name} keys {sorted(bad)}; valid keys: {sorted(fields)}")
    return raw


def resolve(defaults: dict | None = None, file_values: dict | None = None, overrides: dict | None = None):
    """Layer ``{section: {field: value}}`` dicts and build the three configs."""
    merged: dict[str, dict] = {name: {} for name in SECTIONS}
    for layer in (defaults or {}, file_values or {}, overrides or {}):
        for name, vals in layer.items():
            merged[name].update({k: v for k, v in vals.items() if v is not None})
    try:
        return tuple(SECTIONS[name](**merged[name]) for name in ("model", "train", "loss"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(model: ModelConfig, train: TrainConfig, loss: LossConfig) -> str:
    d = {"model": dataclasses.asdict(model), "train": dataclasses.asdict(train), "loss": dataclasses.asdict(loss)}
    d["train"]["betas"] = list(d["train"]["betas"])
    return yaml.safe_dump(d, sort_keys=False)

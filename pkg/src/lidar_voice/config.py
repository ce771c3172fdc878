"""INI run configuration with strict key checking.

Example::

    [fit]
    max_epochs = 50
    class_weights = 1.0, 5.0, 20.0, 5.0

    [model]
    mode = lidar_only
    width = 0.125

    [data]
    root = runs/synth
    val_fraction = 0.2
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .model import ModelConfig
from .training import FitConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None
    no_calib: bool = False
    limit: int | None = None
    val_fraction: float = 0.2


@dataclass
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"fit": FitConfig, "model": ModelConfig, "data": DataConfig}


def _convert(raw: str, template, name: str):
    raw = raw.strip()
    if name == "class_weights":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if name == "limit":
        return None if raw.lower() in ("", "none") else int(raw)
    if name == "grad_clip":
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    built = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    for section, cls in _SECTIONS.items():
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    kwargs[key] = _convert(raw, getattr(defaults, key), key)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from None
        try:
            built[section] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return RunConfig(**built)


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())

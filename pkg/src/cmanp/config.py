"""JSON run configuration with typed ``section.key=value`` overrides.

A config file is a JSON object with any of the sections ``model``, ``train``,
``tasks`` and ``bench``; each section holds a subset of that section's keys
(see :func:`default_config`).  Unknown sections or keys are rejected, and every
value must match the type of its default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .tasks import GpTaskConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    n_sweep: tuple = (256, 1024, 4096)
    chunked: bool = True
    prior_n: tuple = (100, 10000)
    u_fixed: int = 16
    u_sweep: tuple = (2048, 4096, 8192)
    repeats: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: GpTaskConfig = field(default_factory=GpTaskConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in _SECTIONS}


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "tasks": GpTaskConfig, "bench": BenchConfig}


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return RunConfig().to_dict()


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{where} expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{where} expects an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where} expects a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where} expects a string, got {value!r}")
    if isinstance(default, (tuple, list)):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{where} expects a JSON list, got {value!r}") from None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} expects a list, got {value!r}")
        proto = default[0] if default else value[0] if value else 0
        return tuple(_coerce(section, key, v, proto) for v in value)
    raise ConfigError(f"{where}: unsupported default type {type(default).__name__}")


def merge(base: dict, updates: dict, origin: str) -> dict:
    out = {s: dict(v) for s, v in base.items()}
    for section, values in updates.items():
        if section not in out:
            raise ConfigError(f"{origin}: unknown section {section!r} (expected one of {sorted(out)})")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[section][key] = _coerce(section, key, value, out[section][key])
    return out


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, value = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = path.split(".")
    return section, key, value


def build_config(path=None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then overrides, then ``seed``."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
        cfg = merge(cfg, data, str(p))
    for text in overrides:
        section, key, value = parse_override(text)
        cfg = merge(cfg, {section: {key: value}}, "--set")
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
    cfg = {s: {k: tuple(v) if isinstance(v, list) else v for k, v in sec.items()} for s, sec in cfg.items()}
    try:
        return RunConfig(
            model=ModelConfig(**cfg["model"]),
            train=TrainConfig(**cfg["train"]),
            tasks=GpTaskConfig(**cfg["tasks"]),
            bench=BenchConfig(**cfg["bench"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

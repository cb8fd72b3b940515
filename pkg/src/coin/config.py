"""Run configuration: YAML file -> nested frozen dataclasses.

Precedence is defaults < file < command-line overrides. Every section and
key is checked: unknown keys and wrongly typed values raise ``ConfigError``.

Schema (all keys optional)::

    env:      EnvConfig fields, with nested ``geometry`` and ``vehicle`` maps
    train:    TrainConfig fields
    critic:   CriticConfig fields
    ablation: use_vae, use_gat, use_global_critic
    io:       output_dir, log_every, eval_every, eval_seeds, eval_horizon, checkpoint_every
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .critic import CriticConfig
from .env import EnvConfig
from .td3 import Ablation, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IoConfig:
    output_dir: str = "runs/default"
    log_every: int = 1000
    eval_every: int = 0
    eval_seeds: tuple = tuple(range(20))
    eval_horizon: int = 1000
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    ablation: Ablation = field(default_factory=Ablation)
    io: IoConfig = field(default_factory=IoConfig)

    def validate(self) -> None:
        self.env.validate()
        self.train.validate()
        self.critic.validate()


def _check_value(path: str, kind, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, (list, tuple)) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported field type {kind}")


def build(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from a (possibly partial) mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in section '{path}'" if path else ""
        raise ConfigError(f"unknown config key {unknown[0]!r}{where}")
    kwargs = {}
    for key, value in data.items():
        kind = hints[key]
        sub = f"{path}.{key}" if path else key
        kwargs[key] = build(kind, value, sub) if dataclasses.is_dataclass(kind) else _check_value(sub, kind, value)
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def leaf_paths(cls, prefix: str = "") -> list:
    hints = typing.get_type_hints(cls)
    out = []
    for f in dataclasses.fields(cls):
        p = f"{prefix}{f.name}"
        kind = hints[f.name]
        out.extend(leaf_paths(kind, p + ".") if dataclasses.is_dataclass(kind) else [p])
    return out


def resolve_key(key: str) -> str:
    """Dotted paths pass through; a bare leaf name must be unique across sections."""
    paths = leaf_paths(RunConfig)
    if key in paths:
        return key
    hits = [p for p in paths if p.rsplit(".", 1)[-1] == key]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}: use one of {', '.join(hits)}")
    return hits[0]


def apply_overrides(data: dict, overrides) -> dict:
    """``overrides`` is a sequence of (key, raw string) pairs; values are parsed as YAML scalars."""
    for key, raw in overrides:
        path = resolve_key(key).split(".")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        node[path[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return data


def parse_overrides(tokens) -> list:
    """``['--gamma', '0.95', '--train.tau=0.01']`` -> ``[('gamma', '0.95'), ('train.tau', '0.01')]``."""
    out, it = [], iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"override {tok!r} is missing a value")
        out.append((key.replace("-", "_"), raw))
    return out


def load_yaml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def parse_config(path=None, overrides=()) -> RunConfig:
    data = load_yaml(path) if path is not None else {}
    data = apply_overrides(data, overrides)
    cfg = build(RunConfig, data)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(cfg))

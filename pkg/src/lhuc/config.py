"""Strict experiment configuration.

A config file (YAML or JSON) maps onto :class:`ExperimentConfig`. Every key
must name a field; anything else is rejected with its dotted path so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapter import AdaptConfig
from .model import REPARAM_KINDS
from .synth import BumpSpec, ClusterTaskSpec, MixtureBumpSpec
from .trainer import SatConfig, TrainConfig

__all__ = [
    "EXPERIMENTS",
    "ConfigError",
    "NetworkConfig",
    "ExperimentOptions",
    "ExperimentConfig",
    "from_dict",
    "to_dict",
    "load_config",
    "dump_config",
    "config_hash",
]

EXPERIMENTS = ("train_si", "train_sat", "adapt", "two_pass", "one_shot", "factorised", "bump_demo", "gradcheck")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass
class NetworkConfig:
    hidden_sizes: list = field(default_factory=lambda: [64, 64])

    def validate(self):
        if not self.hidden_sizes or any(int(h) < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes needs at least one positive width")
        return self


@dataclass
class ExperimentOptions:
    """Knobs used by individual experiment kinds; unused ones are ignored."""

    alphas: list = field(default_factory=lambda: [0.5, 0.7])
    corruption_rates: list = field(default_factory=lambda: [0.0, 0.1, 0.3])
    data_fractions: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])
    sweep_values: list = field(default_factory=lambda: [1, 2, 3, 5])
    reparam_kinds: list = field(default_factory=lambda: list(REPARAM_KINDS))
    n_speakers: int | None = None
    gradcheck_cases: int = 25
    bump_units: int = 4
    bump_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    checkpoint: str | None = None

    def validate(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alphas must lie in [0, 1]")
        if any(not 0.0 <= r < 1.0 for r in self.corruption_rates):
            raise ValueError("corruption_rates must lie in [0, 1)")
        if any(not 0.0 < f <= 1.0 for f in self.data_fractions):
            raise ValueError("data_fractions must lie in (0, 1]")
        if any(int(s) < 0 for s in self.sweep_values):
            raise ValueError("sweep_values must be non-negative")
        bad = [k for k in self.reparam_kinds if k not in REPARAM_KINDS]
        if bad:
            raise ValueError(f"unknown reparam kinds {bad}")
        if self.n_speakers is not None and self.n_speakers < 1:
            raise ValueError("n_speakers must be positive")
        if self.gradcheck_cases < 1 or self.bump_units < 1:
            raise ValueError("gradcheck_cases and bump_units must be positive")
        return self


@dataclass
class ExperimentConfig:
    experiment: str
    output_dir: str = "out"
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sat: SatConfig = field(default_factory=SatConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    task: ClusterTaskSpec = field(default_factory=ClusterTaskSpec)
    bump: BumpSpec = field(default_factory=BumpSpec)
    mixture: MixtureBumpSpec = field(default_factory=MixtureBumpSpec)
    # the 1-D regression demos want a longer, faster schedule and a bounded scale
    bump_train: TrainConfig = field(default_factory=lambda: TrainConfig(initial_lr=0.3, batch_size=8, max_epochs=100))
    bump_adapt: AdaptConfig = field(
        default_factory=lambda: AdaptConfig(kind="sigmoid2", supervised=True, batch_size=8)
    )
    options: ExperimentOptions = field(default_factory=ExperimentOptions)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        names = ("network", "train", "sat", "adapt", "task", "bump", "mixture", "bump_train", "bump_adapt", "options")
        for name in names:
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        for name in ("adapt", "bump_adapt"):
            if getattr(self, name).kind not in REPARAM_KINDS:
                raise ConfigError(f"{name}.kind", f"unknown reparam kind {getattr(self, name).kind!r}")
        return self


# --------------------------------------------------------------------------
# dict <-> dataclass


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(key, "may not be null")
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, key)
            except ConfigError:
                continue
        raise ConfigError(key, f"value {value!r} does not fit {tp}")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        args = typing.get_args(tp)
        return [_coerce(args[0], v, f"{key}[{i}]") if args else v for i, v in enumerate(value)]
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(key, f"expected {len(args)} values, got {value!r}")
        return tuple(_coerce(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    return value


def from_dict(cls, data, prefix: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else str(key), "unknown configuration key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{prefix}.{f.name}" if prefix else f.name)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{prefix}.{f.name}" if prefix else f.name, "required key is missing")
    return cls(**kwargs)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    """Plain nested dict with every default filled in."""
    return _plain(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("", f"{path}: cannot parse: {exc}") from None
    return from_dict(ExperimentConfig, data).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the resolved config, ignoring where outputs go."""
    d = to_dict(cfg)
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

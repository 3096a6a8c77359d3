"""Experiment configuration: a nested YAML document validated strictly
against the dataclasses it configures, with dotted-path overrides and a
content hash stored alongside every artifact a config produces.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .diffusion import DiffusionSchedule, ModelConfig, TrainSettings
from .fields import GridSpec, TOY_VARIABLES
from .shallow_water import ToyParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    H: int = 64
    W: int = 64
    P: int = 1
    K: int = 5
    s: int = 0
    Lx: float = 1.0e6
    Ly: float = 1.0e6
    lat_span: float = 60.0  # rows span (-lat_span, lat_span); 0 = uniform

    def build(self, f0: float) -> GridSpec:
        """The Coriolis parameter comes from the toy section so the grid and
        the dynamics can never disagree."""
        lats = (np.linspace(-self.lat_span, self.lat_span, self.H)
                if self.lat_span > 0 else np.zeros(self.H))
        variables = TOY_VARIABLES if (self.P, self.K, self.s) == (1, 5, 0) else ()
        return GridSpec(H=self.H, W=self.W, P=self.P, K=self.K, s=self.s,
                        latitudes=lats, Lx=self.Lx, Ly=self.Ly, f0=f0,
                        variables=variables)


@dataclass(frozen=True)
class DataConfig:
    n_traj: int = 10
    n_steps: int = 60
    spinup: int = 40
    seed: int = 1234
    forecast_lead: int = 20
    perturb_amp: float = 0.05


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 200
    probability_flow: bool = False


@dataclass(frozen=True)
class EvalConfig:
    fraction: float = 0.02
    n_states: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)
    sweep_fractions: tuple[float, ...] = (0.10, 0.05, 0.02, 0.01, 0.005)


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/desk"
    grid: GridConfig = field(default_factory=GridConfig)
    toy: ToyParams = field(default_factory=ToyParams)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    train: TrainSettings = field(default_factory=TrainSettings)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _as_plain_dict(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _as_plain_dict(obj):
    if isinstance(obj, dict):
        return {k: _as_plain_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain_dict(v) for v in obj]
    return obj


_SECTION_TYPES = {
    "grid": GridConfig,
    "toy": ToyParams,
    "data": DataConfig,
    "model": ModelConfig,
    "schedule": DiffusionSchedule,
    "train": TrainSettings,
    "sample": SampleConfig,
    "eval": EvalConfig,
}


def _coerce(value, target_type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; "
                          f"known: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if isinstance(value, list):
            elem = int if all(isinstance(v, int) for v in value) else float
            value = tuple(_coerce(v, elem, f"{path}.{name}[]") for v in value)
        else:
            base = {"int": int, "float": float, "bool": bool, "str": str}.get(
                str(f.type).replace("builtins.", ""), None)
            if base is not None:
                value = _coerce(value, base, f"{path}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTION_TYPES) - {"out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    if "out_dir" in data:
        kwargs["out_dir"] = _coerce(data["out_dir"], str, "out_dir")
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a YAML config (defaults when omitted) and apply dotted-path
    overrides of the form section.key=value."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        data = loaded
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        value = yaml.safe_load(raw)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[keys[-1]] = value
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    """Write the resolved config; the file reloads through load_config."""
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

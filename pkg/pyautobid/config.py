"""Run configuration: one JSON file with a mandatory seed and one section per stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .act import ActModelConfig
from .const import INSTRUCTION_OVERRIDES
from .exceptions import ConfigError
from .gqpo import GqpoConfig
from .iql import IqlConfig
from .market import SimulatorConfig
from .think import ThinkConfig

_LOGGER = logging.getLogger(__name__)

SWEEP_AXES = ("budget_ratio", "rtg_weight_w", "instruction_override")
STAGES = ("gen-data", "gen-cot", "train-iql", "train-act", "gqpo-export", "evaluate")


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class EvalConfig:
    """The [eval] section: episode counts, overrides and the sweep grid."""

    episodes: int = 20
    workers: int = 4
    first_seed: int = 10_000
    budget_ratio: float = 1.0
    instruction_override: str = "base"
    rtg_weight_w: float | None = None
    sweep_axis: str = "budget_ratio"
    sweep_values: tuple[Any, ...] = (0.5, 1.0, 1.5)
    scatter_samples: int = 1000

    def __post_init__(self) -> None:
        if self.episodes < 1 or self.workers < 1 or self.scatter_samples < 1:
            raise ValueError("episodes, workers and scatter_samples must be positive")
        if self.budget_ratio <= 0:
            raise ValueError(f"budget_ratio must be positive, got {self.budget_ratio}")
        if self.instruction_override not in INSTRUCTION_OVERRIDES:
            raise ValueError(f"instruction_override must be one of {INSTRUCTION_OVERRIDES}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"sweep_axis must be one of {SWEEP_AXES}")
        check_sweep(self.sweep_axis, self.sweep_values)

    def episode_seeds(self, episodes: int | None = None) -> list[int]:
        """Return the market seeds of the evaluation episodes."""
        return [self.first_seed + i for i in range(episodes or self.episodes)]


def check_sweep(axis: str, values: tuple[Any, ...] | list[Any]) -> None:
    """Raise ValueError unless values form a valid grid for axis."""
    if not values:
        raise ValueError("sweep_values must not be empty")
    if axis == "instruction_override":
        bad = [v for v in values if v not in INSTRUCTION_OVERRIDES]
        if bad:
            raise ValueError(f"unknown instruction overrides {bad}")
        return
    for value in values:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{axis} values must be numbers, got {value!r}")
    if axis == "budget_ratio" and min(values) <= 0:
        raise ValueError("budget_ratio values must be positive")


@dataclass(frozen=True)
class RunConfig:
    """The whole run configuration."""

    seed: int
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    act_model: ActModelConfig = field(default_factory=ActModelConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    think: ThinkConfig = field(default_factory=ThinkConfig)
    gqpo: GqpoConfig = field(default_factory=GqpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        """Return the configuration as plain JSON values."""
        return json.loads(json.dumps(asdict(self)))

    def canonical_json(self) -> str:
        """Return the canonical serialization the hash is taken over."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Return the SHA-256 of the canonical JSON."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def stage_seed(self, stage: str) -> int:
        """Return the seed a pipeline stage derives from the run seed."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return int(np.random.SeedSequence([self.seed, STAGES.index(stage)]).generate_state(1)[0])

    def provenance(self) -> dict[str, Any]:
        """Return the keys every artifact embeds."""
        return {"config_hash": self.config_hash(), "seed": self.seed}


def _convert(hint: Any, value: Any, section: str, key: str) -> Any:
    """Check value against a resolved annotation and convert lists to tuples."""
    where = f"{key}: expected {getattr(hint, '__name__', hint)}, got {value!r}"
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _convert(option, value, section, key)
            except ConfigError:
                continue
        raise ConfigError(section, where)
    if hint is Any:
        return value
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(section, f"{key}: expected a section object, got {value!r}")
        return build_section(hint, value, key if section == "root" else f"{section}.{key}")
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(section, f"{key}: expected a list, got {value!r}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], item, section, key) for item in value)
        if len(args) != len(value):
            raise ConfigError(section, f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(arg, item, section, key) for arg, item in zip(args, value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(section, where)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(section, where)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(section, where)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(section, where)
        return value
    raise ConfigError(section, f"{key}: unsupported annotation {hint!r}")


def build_section(cls: Any, data: dict[str, Any], section: str) -> Any:
    """
    Build one config dataclass from a JSON object.

    Unknown keys and wrongly typed values raise ConfigError naming the section;
    missing keys keep their defaults.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(section, f"unknown keys {unknown}")
    values = {key: _convert(hints[key], value, section, key) for key, value in data.items()}
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(section, str(err)) from err
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(section, str(err)) from err


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Validate a parsed configuration file."""
    if not isinstance(data, dict):
        raise ConfigError("root", "the configuration must be a JSON object")
    seed = data.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("root", f"an integer seed is required, got {seed!r}")
    return build_section(RunConfig, data, "root")


def load_config(path: str | Path) -> RunConfig:
    """Read and validate a configuration file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError("root", f"configuration file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError("root", f"{path} is not valid JSON: {err}") from err
    config = config_from_dict(data)
    _LOGGER.debug("Loaded %s (hash %s)", path, config.config_hash())
    return config


def write_config(path: str | Path, config: RunConfig) -> Path:
    """Write a configuration file that load_config() reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path

"""Run configuration: JSON parse/serialize, dot-path overrides and
cross-module validation with field-level messages."""

from __future__ import annotations

import dataclasses
import enum
import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .dynamics import VehicleParams
from .environment import EnvConfig, GoalKind, RewardConfig, SpawnConfig
from .geometry import GeometryError, RoadParams, RoadType, generate_road
from .perception import PerceptionConfig
from .policy_net import NetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class ScenarioConfig:
    road_type: RoadType = RoadType.STRAIGHT_FOUR
    goal_kind: GoalKind = GoalKind.ALL_LANES_END
    goal_depth: float = 20.0
    road: RoadParams = field(default_factory=RoadParams)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    dt: float = 0.1
    stuck_delay: int = 50
    max_episode_ticks: int = 3000
    control_speed_limits: tuple[float, float] = (5.0, 30.0)


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 20
    output_dir: str = "runs/default"
    seed: int = 0

    def env_config(self, seed: int | None = None) -> EnvConfig:
        s = self.scenario
        return EnvConfig(road_type=s.road_type, road=s.road, reward=self.reward, spawn=s.spawn,
                         perception=self.perception, vehicle=self.vehicle, goal_kind=s.goal_kind,
                         goal_depth=s.goal_depth, dt=s.dt, stuck_delay=s.stuck_delay,
                         max_episode_ticks=s.max_episode_ticks, control_speed_limits=s.control_speed_limits,
                         seed=self.seed if seed is None else seed)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)


# ---------------------------------------------------------------- conversion

def to_dict(obj):
    if is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(path, f"expected one of {[m.value for m in tp]}, got {value!r}") from None
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(path, f"expected a list of {len(args)} values")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}".lstrip("."), "unknown field")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}".lstrip(".")) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a raw config dict (values are JSON,
    falling back to plain strings)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like dotted.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a non-object field")
        node[parts[-1]] = parse_value(raw)
    return data


def _check(path: str, fn):
    try:
        fn()
    except (ValueError, GeometryError) as exc:
        raise ConfigError(path, str(exc)) from None


def validate(cfg: RunConfig) -> RunConfig:
    """Every module-level constraint, reported with the offending path."""
    _check("reward", cfg.reward.validate)
    _check("scenario.spawn", cfg.scenario.spawn.validate)
    _check("scenario.road", cfg.scenario.road.validate)
    # building the road catches layouts the generator rejects, e.g. a merge past the road end
    _check("scenario.road", lambda: generate_road(cfg.scenario.road_type, cfg.scenario.road))
    _check("train", cfg.train.validate)
    s = cfg.scenario
    if s.dt <= 0:
        raise ConfigError("scenario.dt", "must be positive")
    if s.goal_depth <= 0:
        raise ConfigError("scenario.goal_depth", "must be positive")
    if s.max_episode_ticks < 1 or s.stuck_delay < 0:
        raise ConfigError("scenario.max_episode_ticks", "must be at least 1 (stuck_delay non-negative)")
    lo, hi = s.control_speed_limits
    if not 0 <= lo < hi:
        raise ConfigError("scenario.control_speed_limits", "need 0 <= low < high")
    if s.spawn.max_agents < 1:
        raise ConfigError("scenario.spawn.max_agents", "must be at least 1")
    p = cfg.perception
    if p.n_samples < 1 or p.n_rays < 1:
        raise ConfigError("perception", "n_samples and n_rays must be at least 1")
    if p.view_ahead <= 0 or p.view_behind < 0 or p.d_max <= 0 or not 0 < p.fan_deg < 360:
        raise ConfigError("perception", "view ranges, d_max and fan_deg out of range")
    if cfg.net.n_samples != p.n_samples:
        raise ConfigError("net.n_samples", f"must equal perception.n_samples ({p.n_samples})")
    if cfg.net.n_rays != p.n_rays:
        raise ConfigError("net.n_rays", f"must equal perception.n_rays ({p.n_rays})")
    if cfg.eval_episodes < 0:
        raise ConfigError("eval_episodes", "must be non-negative")
    return cfg


def parse_config(data: dict) -> RunConfig:
    return validate(from_dict(RunConfig, data))


def load_config(path: str | Path, overrides: list[str] = ()) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be an object")
    return parse_config(apply_overrides(data, list(overrides)))


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"

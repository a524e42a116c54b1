"""Run configuration: a JSON document with four sections.

Example (every key is optional; omitted keys take the defaults below)::

    {
      "env": {"level_kp": 1.0, "level_ki": 0.03, "setpoints": [0.6, 0.4],
              "tank": {"r_tank": 0.25, "noise_var": 0.015}},
      "hankel": {"L": 10, "N": 1000, "ridge": 1e-6, "amplitude": 1.0, "hold": 20},
      "td3": {"gamma": 0.99, "policy_delay": 4},
      "actor": {"n_q": 4, "hidden": 16},
      "seeds": [0, 1, 2, 3, 4],
      "episodes": 30,
      "noise": true,
      "baseline": false
    }

Unknown keys anywhere are rejected. ``RunConfig.snapshot`` gives the fully
resolved document that is written to every run directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig, TankParams
from .rl import ActorConfig, TD3Config


class ConfigError(ValueError):
    """Configuration failed validation."""


@dataclass(frozen=True)
class HankelConfig:
    L: int = 10
    N: int = 1000
    ridge: float = 1e-6
    order_bound: int | None = None
    amplitude: float = 1.0
    hold: int = 20
    mode: str = "step"
    seed: int = 12345

    def __post_init__(self):
        if self.L < 1 or self.N < 1 or self.hold < 1:
            raise ValueError("L, N and hold must be positive")
        if self.ridge < 0 or self.amplitude < 0:
            raise ValueError("ridge and amplitude must be nonnegative")


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    hankel: HankelConfig = field(default_factory=HankelConfig)
    td3: TD3Config = field(default_factory=TD3Config)
    actor: ActorConfig = field(default_factory=ActorConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    episodes: int = 30
    noise: bool = True
    baseline: bool = False
    checkpoint_every: int = 10
    record_every: int = 1

    def env_config(self) -> EnvConfig:
        return replace(self.env, noise=self.noise)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            value = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "hankel"): HankelConfig,
    (RunConfig, "td3"): TD3Config,
    (RunConfig, "actor"): ActorConfig,
    (EnvConfig, "tank"): TankParams,
}


def _check_types(cfg: RunConfig) -> None:
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds must be a nonempty list of nonnegative integers")
    if not isinstance(cfg.episodes, int) or cfg.episodes < 0:
        raise ConfigError("episodes must be a nonnegative integer")
    if not cfg.env.setpoints or not all(0.0 < float(s) < 1.0 for s in cfg.env.setpoints):
        raise ConfigError("env.setpoints must lie inside the 0-1 m level range")
    if not 0.0 < cfg.env.initial_level < 1.0:
        raise ConfigError("env.initial_level must lie inside the 0-1 m level range")
    if cfg.env.episode_steps < 1:
        raise ConfigError("env.episode_steps must be positive")
    if cfg.hankel.mode not in ("step", "increment"):
        raise ConfigError(f"hankel.mode must be 'step' or 'increment', got {cfg.hankel.mode!r}")
    if cfg.checkpoint_every < 1 or cfg.record_every < 1:
        raise ConfigError("checkpoint_every and record_every must be positive")


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    _check_types(cfg)
    return cfg


def load_config(path=None) -> RunConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def write_snapshot(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.snapshot(), indent=2, sort_keys=True) + "\n")
    return path

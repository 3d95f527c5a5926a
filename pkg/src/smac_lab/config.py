"""Run configuration: training hyperparameters, environment selection, probe settings.

A run config is a JSON object with three sections::

    {"env": {"name": "integrator", ...}, "agent": {...}, "probe": {...}}

``env`` keys other than ``name`` are forwarded to the environment's config class.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .envs import ENV_CONFIGS, config_dict, env_config_fields


class ConfigError(ValueError):
    """Unknown or invalid configuration key/value."""


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 512
    buffer_size: int = 1_000_000
    total_steps: int = 5_000_000
    start_learning_step: int = 100
    lr_risky: float = 1e-4
    lr_modulator: float = 1e-4
    lr_critic: float = 1e-4
    lr_cost_critic: float = 1e-4
    lr_lambda: float = 1e-4
    optimizer: str = "adam"
    hidden: tuple[int, ...] = (256, 256)
    sigma_min: float = 1.0
    zeta: float = 3.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    cost_limit: float = 50.0
    lambda_init: float = 0.0
    lambda_update_every: int = 1000
    cost_discount: float = 1.0
    entropy_coef: float = 0.0
    disable_modulator: bool = False
    disable_distributional: bool = False
    lambda_fixed: float | None = None
    seed: int = 0
    checkpoint_every: int = 0
    metrics_every: int = 1000
    check_invariants: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.zeta <= 0:
            raise ConfigError(f"zeta must be positive, got {self.zeta}")
        if self.sigma_min < 1.0:
            raise ConfigError(f"sigma_min must be >= 1, got {self.sigma_min}")
        if not 0.0 < self.cost_discount <= 1.0:
            raise ConfigError(f"cost_discount must be in (0, 1], got {self.cost_discount}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1 or self.buffer_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size and buffer_size must be >= 1, total_steps >= 0")
        if self.lambda_update_every < 1:
            raise ConfigError("lambda_update_every must be >= 1")
        for name in ("lr_risky", "lr_modulator", "lr_critic", "lr_cost_critic", "lr_lambda"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class ProbeConfig:
    n_rollouts: int = 20
    tolerance: float = 0.01
    probe_episodes: int = 5
    probe_step: int = 500
    eval_episodes: int = 10


@dataclass
class RunConfig:
    env_name: str = "integrator"
    env: dict = field(default_factory=dict)
    agent: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def env_config(self):
        return ENV_CONFIGS[self.env_name](**self.env)

    def to_dict(self) -> dict:
        agent = asdict(self.agent)
        agent["hidden"] = list(agent["hidden"])
        return {
            "env": {"name": self.env_name, **config_dict(self.env_config())},
            "agent": agent,
            "probe": asdict(self.probe),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def valid_keys(env_name: str = "integrator") -> list[str]:
    keys = ["env.name"] + [f"env.{k}" for k in env_config_fields(env_name)]
    keys += [f"agent.{f.name}" for f in fields(TrainConfig)]
    keys += [f"probe.{f.name}" for f in fields(ProbeConfig)]
    return keys


def _unknown(key: str, env_name: str) -> ConfigError:
    return ConfigError(f"unknown config key '{key}'; valid keys: {', '.join(valid_keys(env_name))}")


def from_dict(data: dict) -> RunConfig:
    data = json.loads(json.dumps(data))
    extra = set(data) - {"env", "agent", "probe"}
    if extra:
        raise ConfigError(f"unknown config section(s) {sorted(extra)}; valid: env, agent, probe")
    env = dict(data.get("env", {}))
    env_name = env.pop("name", "integrator")
    if env_name not in ENV_CONFIGS:
        raise ConfigError(f"unknown environment {env_name!r}; choose from {sorted(ENV_CONFIGS)}")
    for key in env:
        if key not in env_config_fields(env_name):
            raise _unknown(f"env.{key}", env_name)
    agent_keys = {f.name for f in fields(TrainConfig)}
    probe_keys = {f.name for f in fields(ProbeConfig)}
    for key in data.get("agent", {}):
        if key not in agent_keys:
            raise _unknown(f"agent.{key}", env_name)
    for key in data.get("probe", {}):
        if key not in probe_keys:
            raise _unknown(f"probe.{key}", env_name)
    try:
        ENV_CONFIGS[env_name](**env)
        agent = TrainConfig(**data.get("agent", {}))
        probe = ProbeConfig(**data.get("probe", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(env_name, env, agent, probe)


def load(path: str | Path) -> RunConfig:
    return from_dict(json.loads(Path(path).read_text()))


def load_profile(name: str) -> RunConfig:
    """Shipped profiles: ``full`` (full-scale quadrotor) and ``desk`` (CI-scale integrator)."""
    text = resources.files("smac_lab").joinpath("profiles", f"{name}.json").read_text()
    return from_dict(json.loads(text))


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in data:
            raise _unknown(key, config.env_name)
        section, name = parts
        if section == "env" and name == "name":
            value = _parse_value(raw)
            if value != data["env"]["name"]:
                data["env"] = {"name": value}
            continue
        if name not in data[section]:
            raise _unknown(key, config.env_name)
        data[section][name] = _parse_value(raw)
    return from_dict(data)

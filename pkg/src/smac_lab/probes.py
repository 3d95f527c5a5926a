"""Measurement harnesses: Monte-Carlo true Q, overestimation-bias curves, evaluation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent.smac import SmacNetworks
from .agent.trainer import load_checkpoint

BIAS_COLUMNS = ("step", "estimated_q", "true_q", "bias")


@dataclass
class BiasSample:
    step: int
    estimated_q: float
    true_q: float

    @property
    def bias(self) -> float:
        return self.estimated_q - self.true_q

    def row(self) -> dict:
        return {"step": self.step, "estimated_q": self.estimated_q, "true_q": self.true_q, "bias": self.bias}


@dataclass
class EvalReport:
    mean_return: float
    mean_episode_cost: float
    violation_counts: dict[str, int]
    episodes: int
    episode_returns: list[float] = field(default_factory=list)
    episode_costs: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeProtocol:
    gamma: float = 0.99
    n_rollouts: int = 20
    tolerance: float = 0.01
    episodes: int = 5
    probe_step: int = 500
    seed: int = 0
    disable_modulator: bool = False


def mc_horizon(gamma: float, r_max: float, tolerance: float = 0.01) -> int:
    """Smallest horizon whose discounted tail bound gamma^H * r_max / (1 - gamma) is below ``tolerance``."""
    if r_max <= 0:
        return 1
    return max(1, math.ceil(math.log(tolerance * (1.0 - gamma) / r_max) / math.log(gamma)))


def probe_step_index(episode_steps: int, probe_step: int = 500) -> int:
    """Use ``probe_step`` when the episode is long enough, otherwise the midpoint."""
    return probe_step if episode_steps > probe_step else episode_steps // 2


def true_q_monte_carlo(policy: Callable[[np.ndarray], np.ndarray], env, probe_state, probe_action,
                       gamma: float, n_rollouts: int = 20, horizon: int | None = None,
                       tolerance: float = 0.01, seed: int = 0) -> float:
    """Mean discounted return of taking ``probe_action`` in ``probe_state`` then following ``policy``.

    Episode time limits are ignored; only true terminal transitions stop a rollout.
    Deterministic environments yield identical rollouts, so one is simulated and reused.
    """
    if horizon is None:
        horizon = mc_horizon(gamma, env.r_max, tolerance)
    rollouts = n_rollouts if getattr(env, "stochastic", False) else 1
    returns = []
    for k in range(rollouts):
        env.set_state(probe_state)
        if getattr(env, "stochastic", False):
            env.rng = np.random.default_rng([seed, k])
        action, total, discount = np.asarray(probe_action, dtype=np.float64), 0.0, 1.0
        for _ in range(horizon):
            out = env.step(action)
            total += discount * out.reward
            discount *= gamma
            if out.done:
                break
            action = policy(out.next_state)
        returns.append(total)
    return float(np.mean(returns))


def estimated_q(nets: SmacNetworks, obs: np.ndarray, action: np.ndarray) -> float:
    """Min over the two online critic means."""
    x, u = np.asarray(obs)[None, :], np.asarray(action)[None, :]
    q1 = nets.critic(nets.online["critic1"], x, u).q_mean.value[0]
    q2 = nets.critic(nets.online["critic2"], x, u).q_mean.value[0]
    return float(min(q1, q2))


def probe_points(nets: SmacNetworks, env, protocol: ProbeProtocol) -> list[tuple]:
    """(state, obs, action) captured at the probe step of each evaluation episode."""
    policy = nets.policy(protocol.disable_modulator)
    index = probe_step_index(env.episode_steps, protocol.probe_step)
    points = []
    for ep in range(protocol.episodes):
        obs = env.reset(np.random.default_rng([protocol.seed, ep]))
        for _ in range(index):
            obs = env.step(policy(obs)).next_state
        points.append((env.get_state(), obs, policy(obs)))
    return points


def bias_sample(nets: SmacNetworks, env, step: int, protocol: ProbeProtocol) -> BiasSample:
    policy = nets.policy(protocol.disable_modulator)
    est, true = [], []
    for state, obs, action in probe_points(nets, env, protocol):
        est.append(estimated_q(nets, obs, action))
        true.append(true_q_monte_carlo(policy, env, state, action, protocol.gamma, protocol.n_rollouts,
                                       tolerance=protocol.tolerance, seed=protocol.seed))
    return BiasSample(step, float(np.mean(est)), float(np.mean(true)))


def bias_curve(checkpoints: Sequence[str | Path], env, protocol: ProbeProtocol) -> list[BiasSample]:
    samples = []
    for path in checkpoints:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        nets, meta = load_checkpoint(path)
        samples.append(bias_sample(nets, env, int(meta["step"]), protocol))
    return samples


def write_bias_csv(samples: Sequence[BiasSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BIAS_COLUMNS)
        for s in samples:
            writer.writerow([s.step, repr(s.estimated_q), repr(s.true_q), repr(s.bias)])


def evaluate(nets: SmacNetworks | Callable, env, episodes: int, seed: int = 0,
             disable_modulator: bool = False) -> EvalReport:
    """Deterministic-policy rollouts; violation counts are steps whose component cost is 1."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    policy = nets.policy(disable_modulator) if isinstance(nets, SmacNetworks) else nets
    counts = dict.fromkeys(env.cost_names, 0)
    returns, costs = [], []
    for ep in range(episodes):
        obs = env.reset(np.random.default_rng([seed, ep]))
        ret = cost = 0.0
        while True:
            out = env.step(policy(obs))
            ret += out.reward
            cost += out.cost
            for name, value in out.cost_components.items():
                counts[name] += int(value == 1.0)
            if out.done or out.truncated:
                break
            obs = out.next_state
        returns.append(ret)
        costs.append(cost)
    return EvalReport(float(np.mean(returns)), float(np.mean(costs)), counts, episodes, returns, costs)

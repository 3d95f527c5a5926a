"""Training loop: act, step, store, lagrange at rollout end, then the update sequence.

One ``numpy.random.Generator`` is consumed per environment step in a fixed
order: action noise, environment (reset) noise, batch indices, reparameterization
noise. Same config and seed therefore give identical metric logs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import TrainConfig
from .buffer import ReplayBuffer
from .smac import (
    ROLES,
    InvariantViolation,
    LagrangeState,
    Optimizers,
    SmacNetworks,
    cost_critic_update,
    critic_update,
    distributional_targets,
    lagrange_update,
    modulator_update,
    risky_policy_update,
    soft_update_all,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "episode", "return", "episode_cost", "lambda", "q1_mean", "q2_mean",
                  "sigma1_mean", "sigma2_mean", "critic_loss", "cost_critic_loss", "policy_obj",
                  "modulator_obj")
_AGG = METRIC_COLUMNS[5:]


class DivergenceError(RuntimeError):
    """Critic estimates or their bootstrap targets left the analytic value range."""


@dataclass
class TrainResult:
    networks: SmacNetworks
    lagrange: LagrangeState
    rows: list[dict] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    invariant_checks: int = 0


class _Aggregate:
    def __init__(self):
        self.sums = dict.fromkeys(_AGG, 0.0)
        self.count = 0

    def add(self, stats: dict) -> None:
        for k in _AGG:
            self.sums[k] += stats[k]
        self.count += 1

    def means(self) -> dict:
        if not self.count:
            return dict.fromkeys(_AGG)
        return {k: v / self.count for k, v in self.sums.items()}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_checkpoint(nets: SmacNetworks, lagrange: LagrangeState, step: int, path: Path) -> Path:
    store, meta = nets.to_store()
    store.step_count = step
    meta.update(step=step, lam=lagrange.lam)
    path.parent.mkdir(parents=True, exist_ok=True)
    store.save(path, meta)
    return path


def load_checkpoint(path: Path) -> tuple[SmacNetworks, dict]:
    from ..diffcore import ParamStore

    store, meta = ParamStore.load(path)
    return SmacNetworks.from_store(store, meta), meta


class Trainer:
    def __init__(self, config: TrainConfig, env, run_dir: Path | None = None):
        self.config = config
        self.env = env
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.rng = np.random.default_rng(config.seed)
        self.nets = SmacNetworks.create(env.obs_dim, env.act_dim, env.u_max, config.hidden, config.seed,
                                        config.sigma_min, config.log_std_min, config.log_std_max)
        self.opt = Optimizers(self.nets, config.optimizer)
        self.buffer = ReplayBuffer(min(config.buffer_size, max(config.total_steps, 1)), env.obs_dim, env.act_dim)
        lam0 = config.lambda_fixed if config.lambda_fixed is not None else config.lambda_init
        self.lagrange = LagrangeState(max(0.0, lam0), config.cost_limit, config.lr_lambda,
                                      config.lambda_update_every, config.cost_discount)
        self.q_bound = 10.0 * env.r_max / (1.0 - config.gamma)
        self.result = TrainResult(self.nets, self.lagrange)
        self.updates = 0

    # ------------------------------------------------------------ checks

    def _check(self, condition: bool, message: str) -> None:
        self.result.invariant_checks += 1
        if not condition:
            raise InvariantViolation(message)

    def _check_targets(self, targets) -> None:
        cfg = self.config
        for i in range(2):
            self._check(bool((targets.sigma[i] >= cfg.sigma_min).all()), f"critic{i + 1} sigma below sigma_min")
            bound = cfg.zeta * targets.sigma_hat[i]
            self._check(bool((np.abs(targets.deltas[i]) <= bound).all()), f"critic{i + 1} residual exceeds zeta*sigma_hat")

    # ------------------------------------------------------------ one update

    def update(self) -> dict:
        cfg, nets, rng = self.config, self.nets, self.rng
        batch = self.buffer.sample(cfg.batch_size, rng)
        targets = distributional_targets(batch, nets, cfg.gamma, cfg.zeta, rng, cfg.disable_modulator)
        q_abs = max(np.abs(targets.q[0]).max(), np.abs(targets.q[1]).max(), np.abs(targets.y_hat).max())
        if q_abs > self.q_bound:
            raise DivergenceError(f"|Q| = {q_abs:.4g} exceeds divergence bound {self.q_bound:.4g}")
        if cfg.check_invariants:
            self._check_targets(targets)

        critic_loss = critic_update(nets, batch, targets, cfg.lr_critic, self.opt, not cfg.disable_distributional)
        cost_loss = cost_critic_update(nets, batch, targets, cfg.lr_cost_critic, self.opt)

        noise_u = rng.standard_normal((len(batch), nets.act_dim))
        noise_d = rng.standard_normal((len(batch), nets.act_dim))
        lam = self.lagrange.lam
        before = nets.online["modulator"].copy() if cfg.check_invariants else None
        policy_obj = risky_policy_update(nets, batch.obs, noise_u, noise_d, cfg.lr_risky, self.opt, lam,
                                         cfg.disable_modulator, cfg.entropy_coef)
        if before is not None:
            self._check(nets.online["modulator"].equals(before), "risky update changed modulator parameters")
        if cfg.disable_modulator:
            modulator_obj = 0.0
        else:
            before = nets.online["risky"].copy() if cfg.check_invariants else None
            modulator_obj = modulator_update(nets, batch.obs, noise_u, noise_d, lam, cfg.lr_modulator, self.opt,
                                             cfg.entropy_coef)
            if before is not None:
                self._check(nets.online["risky"].equals(before), "modulator update changed risky parameters")
        soft_update_all(nets, cfg.tau)
        self.updates += 1
        return {
            "q1_mean": float(targets.q[0].mean()), "q2_mean": float(targets.q[1].mean()),
            "sigma1_mean": float(targets.sigma[0].mean()), "sigma2_mean": float(targets.sigma[1].mean()),
            "critic_loss": critic_loss, "cost_critic_loss": cost_loss,
            "policy_obj": policy_obj, "modulator_obj": modulator_obj,
        }

    # ------------------------------------------------------------ main loop

    def checkpoint(self, step: int) -> None:
        if self.run_dir is None:
            return
        path = self.run_dir / "checkpoints" / f"step_{step}.ckpt"
        self.result.checkpoints.append(save_checkpoint(self.nets, self.lagrange, step, path))

    def run(self) -> TrainResult:
        try:
            self._loop()
        finally:
            if self.run_dir is not None:
                write_metrics(self.result.rows, self.run_dir / "metrics.csv")
        return self.result

    def _loop(self) -> None:
        cfg, env, nets, rng = self.config, self.env, self.nets, self.rng
        rows, episodes = self.result.rows, self.result.episodes
        obs = env.reset(rng)
        episode, ep_return, ep_costs = 0, 0.0, []
        steps_since_lambda = 0
        episode_agg, window_agg = _Aggregate(), _Aggregate()

        for m in range(cfg.total_steps):
            _, _, u = nets.act(obs, rng, disable_modulator=cfg.disable_modulator)
            out = env.step(u)
            self.buffer.add(obs, u, out.reward, out.cost, out.next_state, out.done)
            ep_return += out.reward
            ep_costs.append(out.cost)
            steps_since_lambda += 1

            if out.done or out.truncated:
                ep_cost = self.lagrange.episode_cost(ep_costs)
                if cfg.lambda_fixed is None and steps_since_lambda >= cfg.lambda_update_every:
                    lagrange_update(self.lagrange, ep_costs)
                    steps_since_lambda = 0
                    if cfg.check_invariants:
                        self._check(self.lagrange.lam >= 0.0, "lambda became negative")
                record = {"step": m + 1, "episode": episode, "return": ep_return, "episode_cost": ep_cost,
                          "lambda": self.lagrange.lam, **episode_agg.means()}
                rows.append(record)
                episodes.append(record)
                log.debug("episode %d return %.4f cost %.1f lambda %.4f", episode, ep_return, ep_cost,
                          self.lagrange.lam)
                episode, ep_return, ep_costs = episode + 1, 0.0, []
                episode_agg = _Aggregate()
                obs = env.reset(rng)
            else:
                obs = out.next_state

            if m >= cfg.start_learning_step:
                stats = self.update()
                episode_agg.add(stats)
                window_agg.add(stats)

            step = m + 1
            if cfg.metrics_every and step % cfg.metrics_every == 0 and window_agg.count:
                rows.append({"step": step, "episode": episode, "lambda": self.lagrange.lam, **window_agg.means()})
                window_agg = _Aggregate()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                self.checkpoint(step)


def train(config: TrainConfig, env, run_dir: Path | None = None) -> TrainResult:
    return Trainer(config, env, run_dir).run()


__all__ = ["train", "Trainer", "TrainResult", "DivergenceError", "METRIC_COLUMNS", "ROLES",
           "write_metrics", "read_metrics", "save_checkpoint", "load_checkpoint"]

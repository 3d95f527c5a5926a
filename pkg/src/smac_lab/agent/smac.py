"""Safety-modulated actor-critic: networks, objectives and per-batch updates.

Gradient routing follows the two-path split of the composed action
``u = clip(u_bar + du, -u_max, u_max)``: the risky policy sees ``du`` as a
constant, the modulator sees ``u_bar`` as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..diffcore import Adam, Node, ParamStore, sgd_step, soft_update, value_and_grad
from ..nets import (
    MlpSpec,
    cost_critic_forward,
    critic_forward,
    init_params,
    policy_forward,
    sample_reparameterized,
)
from .buffer import Batch

ROLES = ("risky", "modulator", "critic1", "critic2", "cost1", "cost2")


class InvariantViolation(AssertionError):
    """A runtime training invariant failed."""


def modulate(u_bar, du, u_max: float):
    """Composed action clip(clip(u_bar) + du, -u_max, u_max); works on arrays or Nodes.

    Equal to clip(u_bar + du) whenever u_bar is in range. Clipping u_bar first keeps
    the modulator gradient alive when the unsquashed risky mean leaves the box.
    """
    if isinstance(u_bar, Node) or isinstance(du, Node):
        return dc.clip(dc.add(dc.clip(u_bar, -u_max, u_max), du), -u_max, u_max)
    return np.clip(np.clip(np.asarray(u_bar, dtype=np.float64), -u_max, u_max) + du, -u_max, u_max)


def distance(u, u_bar):
    """Half squared Euclidean distance over the last axis."""
    if isinstance(u, Node) or isinstance(u_bar, Node):
        return dc.mul(dc.sum(dc.square(dc.add(u, dc.mul(u_bar, -1.0))), axis=-1), 0.5)
    diff = np.asarray(u, dtype=np.float64) - np.asarray(u_bar, dtype=np.float64)
    return 0.5 * np.sum(diff * diff, axis=-1)


def kl_gaussian(target_mean, target_sigma, q_mean, sigma):
    """KL(N(target_mean, target_sigma^2) || N(q_mean, sigma^2))."""
    target_sigma = np.asarray(target_sigma, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if (target_sigma <= 0).any() or (sigma <= 0).any():
        raise dc.ContractError("kl_gaussian requires positive standard deviations")
    diff = np.asarray(target_mean, dtype=np.float64) - q_mean
    return np.log(sigma / target_sigma) + (target_sigma ** 2 + diff ** 2) / (2.0 * sigma ** 2) - 0.5


@dataclass
class SmacNetworks:
    obs_dim: int
    act_dim: int
    u_max: float
    specs: dict[str, MlpSpec]
    online: dict[str, ParamStore]
    target: dict[str, ParamStore]
    sigma_min: float = 1.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, u_max: float, hidden=(256, 256), seed: int = 0,
               sigma_min: float = 1.0, log_std_min: float = -5.0, log_std_max: float = 2.0) -> SmacNetworks:
        hidden = tuple(hidden)
        specs = {
            "risky": MlpSpec(obs_dim, hidden, 2 * act_dim),
            "modulator": MlpSpec(obs_dim + act_dim, hidden, 2 * act_dim),
            "critic1": MlpSpec(obs_dim + act_dim, hidden, 2),
            "critic2": MlpSpec(obs_dim + act_dim, hidden, 2),
            "cost1": MlpSpec(obs_dim + act_dim, hidden, 1),
            "cost2": MlpSpec(obs_dim + act_dim, hidden, 1),
        }
        seeds = np.random.SeedSequence(seed).generate_state(len(ROLES))
        online = {role: init_params(specs[role], int(s)) for role, s in zip(ROLES, seeds)}
        target = {role: store.copy() for role, store in online.items()}
        return cls(obs_dim, act_dim, u_max, specs, online, target, sigma_min, log_std_min, log_std_max)

    def copy(self) -> SmacNetworks:
        return SmacNetworks(self.obs_dim, self.act_dim, self.u_max, dict(self.specs),
                            {k: v.copy() for k, v in self.online.items()},
                            {k: v.copy() for k, v in self.target.items()},
                            self.sigma_min, self.log_std_min, self.log_std_max)

    # ------------------------------------------------------------ forward helpers

    def risky_head(self, params, x):
        return policy_forward(params, x, self.log_std_min, self.log_std_max)

    def modulator_head(self, params, x, u_bar):
        xu = dc.concat([dc.const(x) if not isinstance(x, Node) else x,
                        dc.const(u_bar) if not isinstance(u_bar, Node) else u_bar], axis=-1)
        return policy_forward(params, xu, self.log_std_min, self.log_std_max)

    def critic(self, params, x, u):
        return critic_forward(params, x, u, self.sigma_min)

    def cost_critic(self, params, x, u) -> Node:
        return cost_critic_forward(params, x, u)

    def safe_action(self, stores: dict[str, ParamStore], x: np.ndarray, noise_u, noise_d,
                    disable_modulator: bool = False):
        """(u_bar, du, u) as arrays from the given stores; ``None`` noise means the mean."""
        head = self.risky_head(stores["risky"], x)
        u_bar = head.mean.value if noise_u is None else sample_reparameterized(head, noise_u).value
        if disable_modulator:
            du = np.zeros_like(u_bar)
        else:
            mhead = self.modulator_head(stores["modulator"], x, u_bar)
            du = mhead.mean.value if noise_d is None else sample_reparameterized(mhead, noise_d).value
        return u_bar, du, modulate(u_bar, du, self.u_max)

    def act(self, x: np.ndarray, rng: np.random.Generator | None = None, deterministic: bool = False,
            disable_modulator: bool = False):
        """Select (u_bar, du, u) for one observation."""
        x = np.asarray(x, dtype=np.float64)[None, :]
        if deterministic:
            noise_u = noise_d = None
        else:
            noise_u = rng.standard_normal((1, self.act_dim))
            noise_d = rng.standard_normal((1, self.act_dim))
        u_bar, du, u = self.safe_action(self.online, x, noise_u, noise_d, disable_modulator)
        return u_bar[0], du[0], u[0]

    def policy(self, disable_modulator: bool = False):
        """Deterministic safe policy as a plain obs -> action callable."""
        return lambda obs: self.act(obs, deterministic=True, disable_modulator=disable_modulator)[2]

    # ------------------------------------------------------------ checkpoints

    def to_store(self) -> tuple[ParamStore, dict]:
        store = ParamStore()
        for kind, group in (("online", self.online), ("target", self.target)):
            for role in ROLES:
                for name, value in group[role].items():
                    store.add(f"{kind}/{role}/{name}", value)
        meta = {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "u_max": self.u_max,
                "hidden": list(self.specs["risky"].hidden), "sigma_min": self.sigma_min,
                "log_std_min": self.log_std_min, "log_std_max": self.log_std_max}
        return store, meta

    @classmethod
    def from_store(cls, store: ParamStore, meta: dict) -> SmacNetworks:
        nets = cls.create(meta["obs_dim"], meta["act_dim"], meta["u_max"], tuple(meta["hidden"]), 0,
                          meta["sigma_min"], meta["log_std_min"], meta["log_std_max"])
        for kind, group in (("online", nets.online), ("target", nets.target)):
            for role in ROLES:
                for name in group[role].names():
                    group[role][name] = store[f"{kind}/{role}/{name}"]
        return nets


# ---------------------------------------------------------------- targets


@dataclass
class Targets:
    y_hat: np.ndarray  # r + gamma * min_i target Q_i(x', u')
    y_tilde: np.ndarray  # r + gamma * min_i z_i, z_i ~ N(Q_i', sigma_i'^2)
    deltas: tuple[np.ndarray, np.ndarray]  # clipped sampled residuals per critic
    sigma_hat: tuple[float, float]  # batch mean sigma per online critic
    y_cost: np.ndarray  # r_c + gamma * max_i target Qc_i(x', u')
    q: tuple[np.ndarray, np.ndarray] = field(default=None)
    sigma: tuple[np.ndarray, np.ndarray] = field(default=None)


def distributional_targets(batch: Batch, nets: SmacNetworks, gamma: float, zeta: float,
                           rng: np.random.Generator, disable_modulator: bool = False,
                           noise: dict | None = None) -> Targets:
    """Bootstrap targets from the safe target policy and target critics.

    ``noise`` may supply ``next_u``, ``next_d`` and ``z`` arrays to freeze the draws.
    """
    n = len(batch)
    m = nets.act_dim
    if noise is None:
        noise = {"next_u": rng.standard_normal((n, m)), "next_d": rng.standard_normal((n, m)),
                 "z": rng.standard_normal((2, n))}
    _, _, next_u = nets.safe_action(nets.target, batch.next_obs, noise["next_u"], noise["next_d"],
                                    disable_modulator)
    boot = gamma * (1.0 - batch.done)

    t1 = nets.critic(nets.target["critic1"], batch.next_obs, next_u)
    t2 = nets.critic(nets.target["critic2"], batch.next_obs, next_u)
    y_hat = batch.rew + boot * np.minimum(t1.q_mean.value, t2.q_mean.value)
    z1 = t1.q_mean.value + t1.sigma.value * noise["z"][0]
    z2 = t2.q_mean.value + t2.sigma.value * noise["z"][1]
    y_tilde = batch.rew + boot * np.minimum(z1, z2)

    deltas, sigma_hat, qs, sigmas = [], [], [], []
    for role in ("critic1", "critic2"):
        out = nets.critic(nets.online[role], batch.obs, batch.act)
        s_hat = float(np.mean(out.sigma.value))
        deltas.append(np.clip(y_tilde - out.q_mean.value, -zeta * s_hat, zeta * s_hat))
        sigma_hat.append(s_hat)
        qs.append(out.q_mean.value)
        sigmas.append(out.sigma.value)

    c1 = nets.cost_critic(nets.target["cost1"], batch.next_obs, next_u).value
    c2 = nets.cost_critic(nets.target["cost2"], batch.next_obs, next_u).value
    y_cost = batch.cost + boot * np.maximum(c1, c2)
    return Targets(y_hat, y_tilde, tuple(deltas), tuple(sigma_hat), y_cost, tuple(qs), tuple(sigmas))


# ---------------------------------------------------------------- losses / objectives


def critic_loss(params: dict[str, Node], nets: SmacNetworks, batch: Batch, y_hat: np.ndarray,
                delta: np.ndarray, distributional: bool = True, sigma_ref: np.ndarray | None = None) -> Node:
    """Per-batch loss whose gradient is the stabilised KL rule.

    Mean head: (y_hat - Q)^2 / (4 sigma^2) with sigma held constant, giving
    -(y_hat - Q) / (2 sigma^2) * dQ. Sigma head: delta^2 / (2 sigma^2) + log sigma,
    giving -(delta^2 - sigma^2) / sigma^3 * dsigma. Without the distributional
    head the loss is 0.5 * (y_hat - Q)^2. ``sigma_ref`` pins the constant sigma of
    the mean term (finite-difference checks need it fixed across perturbations).
    """
    out = nets.critic(params, batch.obs, batch.act)
    residual = dc.add(dc.const(y_hat), dc.mul(out.q_mean, -1.0))
    if not distributional:
        return dc.mean(dc.mul(dc.square(residual), 0.5))
    sigma_const = out.sigma.value if sigma_ref is None else np.asarray(sigma_ref)
    mean_term = dc.mul(dc.square(residual), dc.const(1.0 / (4.0 * sigma_const ** 2)))
    log_sigma = dc.log(out.sigma)
    inv_sigma_sq = dc.exp(dc.mul(log_sigma, -2.0))
    sigma_term = dc.add(dc.mul(inv_sigma_sq, dc.const(0.5 * delta ** 2)), log_sigma)
    return dc.mean(dc.add(mean_term, sigma_term))


def cost_critic_loss(params: dict[str, Node], nets: SmacNetworks, batch: Batch, y_cost: np.ndarray) -> Node:
    q = nets.cost_critic(params, batch.obs, batch.act)
    return dc.mean(dc.mul(dc.square(dc.add(dc.const(y_cost), dc.mul(q, -1.0))), 0.5))


def _frozen(store: ParamStore) -> dict[str, Node]:
    return store.nodes(trainable=False)


def risky_objective(params: dict[str, Node], nets: SmacNetworks, obs: np.ndarray, noise_u: np.ndarray,
                    noise_d: np.ndarray, lam: float = 0.0, disable_modulator: bool = False,
                    entropy_coef: float = 0.0, du: np.ndarray | None = None) -> Node:
    """E[min_i Q_i(x, u)] with du treated as a constant.

    Without the modulator the risky policy must carry the constraint itself, so
    the objective becomes E[min_i Q_i - lam * max_i Qc_i]. Passing ``du`` freezes
    the correction at that value (finite-difference checks of the detached path).
    """
    head = nets.risky_head(params, obs)
    u_bar = sample_reparameterized(head, noise_u)
    if disable_modulator:
        u = modulate(u_bar, dc.const(np.zeros(u_bar.shape)), nets.u_max)
    elif du is not None:
        u = modulate(u_bar, dc.const(du), nets.u_max)
    else:
        mhead = nets.modulator_head(_frozen(nets.online["modulator"]), obs, dc.detach(u_bar))
        du = dc.detach(sample_reparameterized(mhead, noise_d))
        u = modulate(u_bar, du, nets.u_max)
    q1 = nets.critic(_frozen(nets.online["critic1"]), obs, u).q_mean
    q2 = nets.critic(_frozen(nets.online["critic2"]), obs, u).q_mean
    value = dc.minimum(q1, q2)
    if disable_modulator and lam != 0.0:
        c1 = nets.cost_critic(_frozen(nets.online["cost1"]), obs, u)
        c2 = nets.cost_critic(_frozen(nets.online["cost2"]), obs, u)
        value = dc.add(value, dc.mul(dc.maximum(c1, c2), -lam))
    objective = dc.mean(value)
    if entropy_coef:
        objective = dc.add(objective, dc.mul(dc.mean(dc.sum(head.log_std, axis=-1)), entropy_coef))
    return objective


def modulator_objective(params: dict[str, Node], nets: SmacNetworks, obs: np.ndarray, noise_u: np.ndarray,
                        noise_d: np.ndarray, lam: float, entropy_coef: float = 0.0) -> Node:
    """E[-d(u, u_bar) - lam * max_i Qc_i(x, u)] with u_bar treated as a constant.

    The distance is measured to the executable risky action clip(u_bar).
    """
    head = nets.risky_head(_frozen(nets.online["risky"]), obs)
    u_bar = dc.detach(sample_reparameterized(head, noise_u))
    mhead = nets.modulator_head(params, obs, u_bar)
    du = sample_reparameterized(mhead, noise_d)
    u = modulate(u_bar, du, nets.u_max)
    c1 = nets.cost_critic(_frozen(nets.online["cost1"]), obs, u)
    c2 = nets.cost_critic(_frozen(nets.online["cost2"]), obs, u)
    u_exec = dc.clip(u_bar, -nets.u_max, nets.u_max)
    value = dc.add(dc.mul(distance(u, u_exec), -1.0), dc.mul(dc.maximum(c1, c2), -lam))
    objective = dc.mean(value)
    if entropy_coef:
        objective = dc.add(objective, dc.mul(dc.mean(dc.sum(mhead.log_std, axis=-1)), entropy_coef))
    return objective


# ---------------------------------------------------------------- updates


class Optimizers:
    """One optimizer state per online store."""

    def __init__(self, nets: SmacNetworks, kind: str = "adam"):
        self.kind = kind
        self.adam = {role: Adam(nets.online[role]) for role in ROLES} if kind == "adam" else {}

    def step(self, role: str, store: ParamStore, grads: dict, lr: float) -> None:
        if self.kind == "adam":
            self.adam[role].step(store, grads, lr)
        else:
            sgd_step(store, grads, lr)


def _finite(role: str, loss: float, grads: dict) -> None:
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise dc.NumericError(f"non-finite gradient in {role} update (loss={loss}, params={bad})")


def critic_update(nets: SmacNetworks, batch: Batch, targets: Targets, lr: float, opt: Optimizers,
                  distributional: bool = True) -> float:
    """Descend both distributional critics independently; returns the mean loss."""
    losses = []
    for i, role in enumerate(("critic1", "critic2")):
        loss, grads = value_and_grad(
            lambda p, d=targets.deltas[i]: critic_loss(p, nets, batch, targets.y_hat, d, distributional),
            nets.online[role])
        _finite(role, loss, grads)
        opt.step(role, nets.online[role], grads, lr)
        losses.append(loss)
    return float(np.mean(losses))


def cost_critic_update(nets: SmacNetworks, batch: Batch, targets: Targets, lr: float, opt: Optimizers) -> float:
    losses = []
    for role in ("cost1", "cost2"):
        loss, grads = value_and_grad(lambda p: cost_critic_loss(p, nets, batch, targets.y_cost), nets.online[role])
        _finite(role, loss, grads)
        opt.step(role, nets.online[role], grads, lr)
        losses.append(loss)
    return float(np.mean(losses))


def risky_policy_update(nets: SmacNetworks, obs: np.ndarray, noise_u, noise_d, lr: float, opt: Optimizers,
                        lam: float = 0.0, disable_modulator: bool = False, entropy_coef: float = 0.0) -> float:
    """Gradient ascent on the risky objective; returns the objective value."""
    objective, grads = value_and_grad(
        lambda p: risky_objective(p, nets, obs, noise_u, noise_d, lam, disable_modulator, entropy_coef),
        nets.online["risky"])
    _finite("risky", objective, grads)
    opt.step("risky", nets.online["risky"], {k: -g for k, g in grads.items()}, lr)
    return objective


def modulator_update(nets: SmacNetworks, obs: np.ndarray, noise_u, noise_d, lam: float, lr: float,
                     opt: Optimizers, entropy_coef: float = 0.0) -> float:
    objective, grads = value_and_grad(
        lambda p: modulator_objective(p, nets, obs, noise_u, noise_d, lam, entropy_coef),
        nets.online["modulator"])
    _finite("modulator", objective, grads)
    opt.step("modulator", nets.online["modulator"], {k: -g for k, g in grads.items()}, lr)
    return objective


def soft_update_all(nets: SmacNetworks, tau: float) -> None:
    for role in ROLES:
        soft_update(nets.target[role], nets.online[role], tau)


# ---------------------------------------------------------------- lagrange


@dataclass
class LagrangeState:
    lam: float = 0.0
    cost_limit: float = 50.0
    lr: float = 1e-4
    update_every: int = 1000
    cost_discount: float = 1.0

    def episode_cost(self, costs) -> float:
        costs = np.asarray(costs, dtype=np.float64)
        return float(np.sum(costs * self.cost_discount ** np.arange(len(costs))))


def lagrange_update(state: LagrangeState, episode_costs) -> LagrangeState:
    """lam <- max(0, lam - lr * (C - sum_t gamma_c^t c_t))."""
    grad = state.cost_limit - state.episode_cost(episode_costs)
    state.lam = max(0.0, state.lam - state.lr * grad)
    return state

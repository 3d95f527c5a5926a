"""Constrained MDP environments: a planar quadrotor hover task and a 1-D double integrator.

Both expose the same interface: ``reset(seed) -> obs``, ``step(action) -> CmdpStep``,
plus ``get_state``/``set_state`` so probes can restart from a captured state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from .diffcore import NumericError


@dataclass
class CmdpStep:
    next_state: np.ndarray
    reward: float
    cost: float
    done: bool
    truncated: bool = False
    cost_components: dict = field(default_factory=dict)


# ---------------------------------------------------------------- quadrotor


@dataclass(frozen=True)
class QuadConfig:
    dt: float = 1.0 / 240.0
    episode_steps: int = 1000
    u_max: float = 1.0
    hover_target: tuple[float, float] = (0.0, 1.5)
    mass: float = 0.028
    gravity: float = 9.81
    inertia: float = 1.4e-5
    thrust2weight: float = 1.88
    max_pitch_cmd: float = math.pi / 4
    k_p: float = 20.0
    k_d: float = 4.0
    angle_limit: float = 0.2
    stay_radius: float = 0.02
    # position box as offsets from the hover target: (x_lo, x_hi, z_lo, z_hi); z_lo = ground
    bounds: tuple[float, float, float, float] = (-1.0, 1.0, -1.5, 1.0)
    start_offset: tuple[float, float] = (0.0, -0.5)
    terminate_on_hit: bool = False
    literal_cost_direction: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.episode_steps < 1 or self.angle_limit <= 0:
            raise ValueError("QuadConfig requires dt > 0, episode_steps >= 1, angle_limit > 0")
        object.__setattr__(self, "hover_target", tuple(self.hover_target))
        object.__setattr__(self, "bounds", tuple(self.bounds))
        object.__setattr__(self, "start_offset", tuple(self.start_offset))


@dataclass
class QuadrotorState:
    p: np.ndarray  # (x, z) offset from hover target, m
    v: np.ndarray  # m/s
    theta: float = 0.0
    omega: float = 0.0
    t: int = 0

    def copy(self) -> QuadrotorState:
        return QuadrotorState(self.p.copy(), self.v.copy(), self.theta, self.omega, self.t)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def quad_reset(config: QuadConfig, seed) -> QuadrotorState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_lo, x_hi, z_lo, z_hi = config.bounds
    half = 0.1 * np.array([x_hi - x_lo, z_hi - z_lo])
    start = np.array(config.start_offset, dtype=np.float64)
    p = start + rng.uniform(-half, half)
    p = np.clip(p, [x_lo, z_lo], [x_hi, z_hi])
    return QuadrotorState(p=p, v=np.zeros(2), theta=0.0, omega=0.0, t=0)


def quad_observe(state: QuadrotorState, config: QuadConfig | None = None) -> np.ndarray:
    return np.array([state.p[0], state.p[1], state.v[0], state.v[1],
                     math.sin(state.theta), math.cos(state.theta), state.omega])


def quad_action_to_commands(action, config: QuadConfig) -> tuple[float, float]:
    """Map [-u_max, u_max]^2 to (thrust acceleration, pitch command)."""
    a, th = np.clip(np.asarray(action, dtype=np.float64), -config.u_max, config.u_max) / config.u_max
    # thrust = 0.5 (a + 1) t2w g, written around the hover point so hover_action maps to g exactly
    t2w, g = config.thrust2weight, config.gravity
    thrust = g + 0.5 * t2w * g * (a - (2.0 / t2w - 1.0))
    return float(min(max(thrust, 0.0), t2w * g)), float(th * config.max_pitch_cmd)


def hover_action(config: QuadConfig) -> np.ndarray:
    """Action whose thrust exactly balances gravity at zero pitch."""
    a = 2.0 / config.thrust2weight - 1.0
    return np.array([a * config.u_max, 0.0])


def _outside(p: np.ndarray, config: QuadConfig) -> bool:
    x_lo, x_hi, z_lo, z_hi = config.bounds
    return bool(p[0] <= x_lo or p[0] >= x_hi or p[1] <= z_lo or p[1] >= z_hi)


def quad_reward(state: QuadrotorState, action, next_state: QuadrotorState, config: QuadConfig) -> float:
    p_norm = float(np.linalg.norm(next_state.p))
    r_dis = -p_norm
    r_vel = -0.1 * float(np.linalg.norm(next_state.v))
    r_act = -float(np.linalg.norm(action))
    r_hit = -1.0 if _outside(next_state.p, config) else 0.0
    r_sta = 1.5 if p_norm < config.stay_radius else 0.0
    return (r_dis + r_vel + r_act + r_hit + r_sta) * config.dt


def quad_cost_components(state: QuadrotorState, config: QuadConfig) -> dict[str, float]:
    """Roll and yaw do not exist in the plane and are kept as zero placeholders."""
    if config.literal_cost_direction:
        pitch = 1.0 if abs(state.theta) < config.angle_limit else 0.0
    else:
        pitch = 1.0 if abs(state.theta) > config.angle_limit else 0.0
    return {"roll": 0.0, "pitch": pitch, "yaw": 0.0}


def quad_cost(state: QuadrotorState, config: QuadConfig) -> float:
    return float(sum(quad_cost_components(state, config).values()))


@lru_cache(maxsize=32)
def _attitude_propagators(k_p: float, k_d: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """exp(A dt) and exp(A dt / 2) for the attitude loop error dynamics (theta - cmd, omega)."""
    a = np.array([[0.0, 1.0], [-k_p, -k_d]])
    return expm(a * dt), expm(a * dt / 2.0)


def quad_dynamics(state: QuadrotorState, thrust: float, theta_cmd: float,
                  config: QuadConfig) -> tuple[QuadrotorState, bool]:
    """Advance one step from physical commands held for ``dt``; returns (next_state, hit_boundary).

    The attitude loop omega_dot = k_p (cmd - theta) - k_d omega is linear with a constant
    command, so it is propagated exactly. Translation uses the mid-step pitch and an exact
    constant-acceleration position update.
    """
    dt, g = config.dt, config.gravity
    full, half = _attitude_propagators(config.k_p, config.k_d, dt)
    err = np.array([state.theta - theta_cmd, state.omega])
    err_next = full @ err
    theta_mid = float(half[0] @ err) + theta_cmd
    theta = wrap_angle(float(err_next[0]) + theta_cmd)
    omega = float(err_next[1])
    acc = np.array([thrust * math.sin(theta_mid), thrust * math.cos(theta_mid) - g])
    p = state.p + state.v * dt + 0.5 * acc * dt * dt
    v = state.v + acc * dt

    x_lo, x_hi, z_lo, z_hi = config.bounds
    lo, hi = np.array([x_lo, z_lo]), np.array([x_hi, z_hi])
    hit = bool((p <= lo).any() or (p >= hi).any())
    if hit:
        clamped = np.clip(p, lo, hi)
        v = np.where(clamped != p, 0.0, v)
        p = clamped
    return QuadrotorState(p=p, v=v, theta=theta, omega=omega, t=state.t + 1), hit


def quad_step(state: QuadrotorState, action, config: QuadConfig) -> tuple[QuadrotorState, CmdpStep]:
    action = np.asarray(action, dtype=np.float64)
    if not np.isfinite(action).all():
        raise NumericError("non-finite action passed to quad_step")
    thrust, theta_cmd = quad_action_to_commands(action, config)
    nxt, hit = quad_dynamics(state, thrust, theta_cmd, config)
    r = quad_reward(state, action, nxt, config)
    components = quad_cost_components(nxt, config)
    truncated = nxt.t >= config.episode_steps
    done = bool(hit and config.terminate_on_hit)
    return nxt, CmdpStep(quad_observe(nxt, config), r, float(sum(components.values())),
                         done, truncated, components)


class Quad2DEnv:
    name = "quad2d"
    obs_dim = 7
    act_dim = 2
    cost_names = ("roll", "pitch", "yaw")
    stochastic = False

    def __init__(self, config: QuadConfig | None = None):
        self.config = config or QuadConfig()
        self.state: QuadrotorState | None = None

    @property
    def u_max(self) -> float:
        return self.config.u_max

    @property
    def episode_steps(self) -> int:
        return self.config.episode_steps

    @property
    def max_cost(self) -> float:
        return 1.0

    @property
    def r_max(self) -> float:
        """Bound on |reward| over the position box."""
        x_lo, x_hi, z_lo, z_hi = self.config.bounds
        p = math.hypot(max(abs(x_lo), abs(x_hi)), max(abs(z_lo), abs(z_hi)))
        v = 30.0 / 3.6 * math.sqrt(2)
        return (p + 0.1 * v + math.sqrt(2) * self.config.u_max + 1.0 + 1.5) * self.config.dt

    def reset(self, seed) -> np.ndarray:
        self.state = quad_reset(self.config, seed)
        return quad_observe(self.state)

    def step(self, action) -> CmdpStep:
        self.state, out = quad_step(self.state, action, self.config)
        return out

    def get_state(self) -> QuadrotorState:
        return self.state.copy()

    def set_state(self, state: QuadrotorState) -> np.ndarray:
        self.state = state.copy()
        return quad_observe(self.state)


# ---------------------------------------------------------------- integrator


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.05
    episode_steps: int = 200
    u_max: float = 1.0
    v_limit: float = 0.5
    start_range: tuple[float, float] = (1.0, 2.0)
    p_max: float = 5.0
    v_max: float = 5.0

    def __post_init__(self):
        if self.dt <= 0 or self.episode_steps < 1 or self.v_limit <= 0:
            raise ValueError("IntegratorConfig requires dt > 0, episode_steps >= 1, v_limit > 0")
        object.__setattr__(self, "start_range", tuple(self.start_range))


@dataclass
class IntegratorState:
    p: float
    v: float
    t: int = 0

    def copy(self) -> IntegratorState:
        return IntegratorState(self.p, self.v, self.t)


def integrator_reward(p: float, v: float, u: float, config: IntegratorConfig) -> float:
    return -(p * p + 0.1 * v * v + 0.01 * u * u) * config.dt


def integrator_cost(v: float, config: IntegratorConfig) -> float:
    return 1.0 if abs(v) > config.v_limit else 0.0


def integrator_step(state: IntegratorState, action, config: IntegratorConfig) -> tuple[IntegratorState, CmdpStep]:
    u = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
    if not math.isfinite(u):
        raise NumericError("non-finite action passed to integrator_step")
    u = min(max(u, -config.u_max), config.u_max)
    v = min(max(state.v + u * config.dt, -config.v_max), config.v_max)
    p = state.p + v * config.dt
    if abs(p) >= config.p_max:
        p, v = math.copysign(config.p_max, p), 0.0
    nxt = IntegratorState(p, v, state.t + 1)
    c = integrator_cost(v, config)
    r = integrator_reward(state.p, state.v, u, config)
    return nxt, CmdpStep(np.array([p, v]), r, c, False, nxt.t >= config.episode_steps, {"velocity": c})


class IntegratorEnv:
    name = "integrator"
    obs_dim = 2
    act_dim = 1
    cost_names = ("velocity",)
    stochastic = False

    def __init__(self, config: IntegratorConfig | None = None):
        self.config = config or IntegratorConfig()
        self.state: IntegratorState | None = None

    @property
    def u_max(self) -> float:
        return self.config.u_max

    @property
    def episode_steps(self) -> int:
        return self.config.episode_steps

    @property
    def max_cost(self) -> float:
        return 1.0

    @property
    def r_max(self) -> float:
        c = self.config
        return (c.p_max ** 2 + 0.1 * c.v_max ** 2 + 0.01 * c.u_max ** 2) * c.dt

    def reset(self, seed) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lo, hi = self.config.start_range
        p = rng.uniform(lo, hi) * (1.0 if rng.uniform() < 0.5 else -1.0)
        self.state = IntegratorState(float(p), 0.0, 0)
        return np.array([self.state.p, self.state.v])

    def step(self, action) -> CmdpStep:
        self.state, out = integrator_step(self.state, action, self.config)
        return out

    def get_state(self) -> IntegratorState:
        return self.state.copy()

    def set_state(self, state: IntegratorState) -> np.ndarray:
        self.state = state.copy()
        return np.array([self.state.p, self.state.v])


ENV_CONFIGS = {"quad2d": QuadConfig, "integrator": IntegratorConfig}
ENV_CLASSES = {"quad2d": Quad2DEnv, "integrator": IntegratorEnv}


def env_config_fields(name: str) -> list[str]:
    return [f.name for f in fields(ENV_CONFIGS[name])]


def make_env(name: str, **overrides):
    if name not in ENV_CLASSES:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_CLASSES)}")
    config = ENV_CONFIGS[name](**overrides)
    return ENV_CLASSES[name](config)


def config_dict(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


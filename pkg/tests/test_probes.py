import csv
import math

import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from smac_lab.agent import LagrangeState, SmacNetworks, save_checkpoint
from smac_lab.envs import IntegratorConfig, IntegratorEnv, IntegratorState, make_env
from smac_lab.probes import (
    BIAS_COLUMNS,
    BiasSample,
    ProbeProtocol,
    bias_curve,
    evaluate,
    mc_horizon,
    probe_step_index,
    true_q_monte_carlo,
    write_bias_csv,
)


def test_mc_horizon_tail_bound():
    for gamma, r_max, tol in [(0.99, 1.25, 0.01), (0.9, 10.0, 1e-3), (0.5, 1.0, 0.1)]:
        h = mc_horizon(gamma, r_max, tol)
        assert gamma ** h * r_max / (1 - gamma) <= tol
        assert gamma ** (h - 1) * r_max / (1 - gamma) > tol


def test_probe_step_index():
    assert probe_step_index(1000, 500) == 500
    assert probe_step_index(200, 500) == 100


def test_true_q_matches_lyapunov_oracle():
    """Linear policy on the unsaturated integrator: Q has a closed form."""
    cfg = IntegratorConfig()
    env = IntegratorEnv(cfg)
    dt, gamma = cfg.dt, 0.99
    k = np.array([0.5, 0.8])  # gentle gains keep |u| < 1 and |v| small
    a = np.array([[1.0, dt], [0.0, 1.0]])
    b = np.array([dt * dt, dt])
    a_cl = a - np.outer(b, k)
    cost = dt * (np.diag([1.0, 0.1]) + 0.01 * np.outer(k, k))
    p = solve_discrete_lyapunov(math.sqrt(gamma) * a_cl.T, cost)  # P = cost + gamma A'PA

    def policy(obs):
        return np.array([-k @ obs])

    for x0, u0 in [((1.0, 0.0), -0.3), ((-0.6, 0.2), 0.5), ((0.3, -0.1), 0.0)]:
        x0 = np.array(x0)
        x1 = a @ x0 + b * u0
        oracle = -(x0 @ np.diag([1.0, 0.1]) @ x0 + 0.01 * u0 * u0) * dt - gamma * x1 @ p @ x1
        state = IntegratorState(*x0)
        estimate = true_q_monte_carlo(policy, env, state, np.array([u0]), gamma, n_rollouts=20, tolerance=1e-6)
        assert estimate == pytest.approx(oracle, rel=1e-6, abs=1e-9)


def test_true_q_within_reward_bounds():
    env = make_env("integrator")
    env.reset(0)
    state = env.get_state()
    q = true_q_monte_carlo(lambda obs: np.array([1.0]), env, state, np.array([1.0]), 0.99)
    assert -env.r_max / 0.01 <= q <= 0.0


def test_bias_sample_sign():
    assert BiasSample(10, 1.5, 1.0).bias == pytest.approx(0.5)


def _tiny_checkpoints(tmp_path, n=3):
    nets = SmacNetworks.create(2, 1, 1.0, (8, 8), seed=0)
    paths = []
    for i in range(n):
        for store in nets.online.values():
            store.set_flat(store.flat() * 0.9)
        paths.append(save_checkpoint(nets, LagrangeState(), 100 * (i + 1), tmp_path / f"step_{100 * (i + 1)}.ckpt"))
    return paths


def test_bias_curve_rows_and_csv(tmp_path):
    env = make_env("integrator", episode_steps=40)
    paths = _tiny_checkpoints(tmp_path)
    samples = bias_curve(paths, env, ProbeProtocol(episodes=2, n_rollouts=2))
    assert [s.step for s in samples] == [100, 200, 300]
    out = tmp_path / "bias.csv"
    write_bias_csv(samples, out)
    write_bias_csv(samples, out)  # overwrite, never append
    raw = out.read_bytes()
    assert b"\r" not in raw
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == BIAS_COLUMNS and len(rows) == 4
    for row, s in zip(rows[1:], samples):
        assert float(row[3]) == pytest.approx(float(row[1]) - float(row[2]))
        assert float(row[1]) == s.estimated_q
    with pytest.raises(FileNotFoundError):
        bias_curve([tmp_path / "nope.ckpt"], env, ProbeProtocol())


def test_evaluate_report():
    env = make_env("integrator", episode_steps=60)
    nets = SmacNetworks.create(2, 1, 1.0, (8, 8), seed=1)
    a = evaluate(nets, env, 3, seed=4)
    b = evaluate(nets, env, 3, seed=4)
    assert a.episodes == 3 and len(a.episode_returns) == 3
    assert a.to_dict() == b.to_dict()
    assert a.violation_counts["velocity"] == pytest.approx(a.mean_episode_cost * 3)
    with pytest.raises(ValueError):
        evaluate(nets, env, 0)


def test_evaluate_counts_violations_of_fast_policy():
    env = make_env("integrator", episode_steps=30)
    report = evaluate(lambda obs: np.array([1.0]), env, 2)
    # resets are at rest and full throttle adds 0.05 per step, so |v| > 0.5 from about step 11 on
    assert report.violation_counts["velocity"] >= 2 * 19
    assert report.violation_counts["velocity"] == sum(report.episode_costs)


def test_true_q_horizon_self_consistency():
    env = make_env("integrator")
    env.reset(3)
    state = env.get_state()
    policy = lambda obs: np.array([float(np.clip(-obs @ [0.5, 0.8], -1, 1))])  # noqa: E731
    h = mc_horizon(0.99, env.r_max, 0.01)
    short = true_q_monte_carlo(policy, env, state, np.array([0.2]), 0.99, horizon=h)
    long = true_q_monte_carlo(policy, env, state, np.array([0.2]), 0.99, horizon=int(1.5 * h))
    assert abs(long - short) < 0.01


def test_evaluate_counts_are_integers():
    env = make_env("quad2d", episode_steps=240)  # one second: the pitch loop settles past 0.2 rad
    report = evaluate(lambda obs: np.array([0.0, 1.0]), env, 2)
    assert all(isinstance(v, int) for v in report.violation_counts.values())
    assert report.violation_counts["pitch"] > 0 and report.violation_counts["roll"] == 0

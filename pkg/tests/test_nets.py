import numpy as np
import pytest

from smac_lab import diffcore as dc
from smac_lab.diffcore import NumericError
from smac_lab.nets import (
    MlpSpec,
    critic_forward,
    init_params,
    policy_forward,
    sample_reparameterized,
    zero_params,
)

from conftest import fd_grad, rel_error


def test_spec_defaults_and_validation():
    assert MlpSpec(3).hidden == (256, 256)
    with pytest.raises(ValueError):
        MlpSpec(0)
    with pytest.raises(ValueError):
        MlpSpec(3, (8, 0))


def test_init_params_deterministic_zero_biases_and_count():
    spec = MlpSpec(7, (256, 256), 4)
    a, b = init_params(spec, 11), init_params(spec, 11)
    assert a.to_bytes() == b.to_bytes()
    assert all(not a[k].any() for k in a if k.startswith("b"))
    assert a.num_params() == 7 * 256 + 256 + 256 * 256 + 256 + 256 * 4 + 4 == 68_868
    bound = 1 / np.sqrt(7)
    assert np.abs(a["W0"]).max() <= bound


def test_policy_zero_net_gives_zero_mean_and_log_std():
    head = policy_forward(zero_params(MlpSpec(3, (8, 8), 4)), np.ones(3))
    np.testing.assert_array_equal(head.mean.value, np.zeros(2))
    np.testing.assert_array_equal(head.log_std.value, np.zeros(2))


def test_log_std_clamped(rng):
    params = init_params(MlpSpec(3, (8, 8), 4), 0)
    params["b2"] = np.array([0.0, 0.0, 50.0, -50.0])
    head = policy_forward(params, rng.normal(size=(10, 3)))
    assert head.log_std.value.max() <= 2.0 and head.log_std.value.min() >= -5.0
    assert (head.std.value > 0).all()


def test_policy_row_wise_batch_invariance(rng):
    params = init_params(MlpSpec(3, (8, 8), 4), 1)
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    full = policy_forward(params, x).mean.value
    np.testing.assert_array_equal(policy_forward(params, x[perm]).mean.value, full[perm])
    for i in range(6):
        np.testing.assert_allclose(policy_forward(params, x[i]).mean.value, full[i], atol=1e-14)


def test_policy_rejects_non_finite_state():
    with pytest.raises(NumericError):
        policy_forward(init_params(MlpSpec(3, (8,), 2), 0), np.array([0.0, np.nan, 1.0]))


def test_policy_mean_gradient_matches_fd(rng):
    params = init_params(MlpSpec(3, (8, 8), 4), 2)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 2))

    def loss(p):
        return dc.sum(dc.mul(policy_forward(p, x).mean, w))

    _, grads = dc.value_and_grad(loss, params)
    assert rel_error(grads, fd_grad(lambda s: float(loss(s).value), params)) < 1e-4


def test_reparameterized_examples():
    params = zero_params(MlpSpec(3, (4,), 4))
    head = policy_forward(params, np.ones(3))
    np.testing.assert_array_equal(sample_reparameterized(head, np.zeros(2)).value, head.mean.value)
    np.testing.assert_array_equal(sample_reparameterized(head, np.array([1.0, -2.0])).value, [1.0, -2.0])
    with pytest.raises(dc.DimensionError):
        sample_reparameterized(head, np.zeros(3))


def test_reparameterized_gradients_identity_and_noise():
    mean, log_std = dc.param(np.array([0.3, -0.1])), dc.param(np.array([0.2, -0.4]))
    from smac_lab.nets import GaussianHead

    noise = np.array([1.5, -0.7])
    dc.backward(dc.sum(sample_reparameterized(GaussianHead(mean, log_std), noise)))
    np.testing.assert_array_equal(mean.grad, [1.0, 1.0])
    np.testing.assert_allclose(log_std.grad, noise * np.exp(log_std.value))


def test_reparameterized_monte_carlo_mean(rng):
    params = init_params(MlpSpec(3, (8,), 2), 3)
    head = policy_forward(params, np.array([0.1, 0.2, 0.3]))
    n = 100_000
    samples = sample_reparameterized(head, rng.standard_normal((n, 1))).value
    std = head.std.value[0]
    assert abs(samples.mean() - head.mean.value[0]) < 4 * std / np.sqrt(n)


def test_critic_sigma_floor():
    spec = MlpSpec(3, (4,), 2)
    params = zero_params(spec)
    params["b1"] = np.array([0.7, 0.3])
    out = critic_forward(params, np.ones(2), np.ones(1), sigma_min=1.0)
    assert out.sigma.value == 1.0 and out.q_mean.value == 0.7
    params["b1"] = np.array([0.0, 2.5])
    out = critic_forward(params, np.ones(2), np.ones(1), sigma_min=1.0)
    assert out.sigma.value == 2.5 and out.q_mean.value == 0.0


def test_critic_sigma_gradient_zero_below_floor(rng):
    params = init_params(MlpSpec(3, (8,), 2), 4)
    params["b1"] = np.array([0.0, -10.0])
    x, u = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    _, grads = dc.value_and_grad(lambda p: dc.sum(critic_forward(p, x, u).sigma), params)
    assert all(not g.any() for g in grads.values())

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bwcomm.tensor_nn import (LOG_VAR_MAX, LOG_VAR_MIN, AdamState, ConfigError, DenseNet, GaussianHead,
                              NonFiniteError, adam_step, clip_by_global_norm, grad_check, sample_reparam,
                              sample_reparam_grad)

from oracles import loop_forward

# seed-0 [3, 4, 2] tanh net at x = [0.5, -1, 2]; recomputed below with plain python loops
FROZEN_FORWARD = [-0.1944651049948002, -0.4419631563813614]


def test_identity_linear_net():
    net = DenseNet([np.eye(2)], [np.zeros(2)], ["linear"])
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_weights_give_bias():
    net = DenseNet([np.zeros((3, 2))], [np.array([0.5, -1.5])], ["linear"])
    out = net.forward(np.random.default_rng(1).standard_normal((4, 3)))
    np.testing.assert_array_equal(out, np.tile([0.5, -1.5], (4, 1)))


def test_seed0_fixture_frozen_and_matches_loop_oracle():
    net = DenseNet.init([3, 4, 2], np.random.default_rng(0), hidden="tanh")
    x = [0.5, -1.0, 2.0]
    out = net.forward(np.array([x]))[0]
    np.testing.assert_allclose(out, loop_forward(net, x), rtol=0, atol=1e-14)
    np.testing.assert_allclose(out, FROZEN_FORWARD, rtol=0, atol=1e-14)


@pytest.mark.parametrize("hidden", ["relu", "tanh"])
def test_forward_matches_loop_oracle_random(hidden):
    rng = np.random.default_rng(7)
    net = DenseNet.init([5, 6, 3, 2], rng, hidden=hidden)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(net.forward(x[None])[0], loop_forward(net, x), atol=1e-12)


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    net = DenseNet.init([4, 8, 2], rng)
    x = rng.standard_normal((5, 4))
    a = net.forward(x)
    b = net.forward(x)
    assert a.tobytes() == b.tobytes()


def test_layer_dims_must_chain():
    with pytest.raises(ConfigError):
        DenseNet([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)], ["relu", "linear"])


def test_linear_backward_is_outer_product():
    W = np.array([[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]])
    net = DenseNet([W], [np.zeros(2)], ["linear"])
    x = np.array([[1.0, 2.0, 3.0]])
    _, cache = net.forward(x, cache=True)
    grads, dx = net.backward(cache, np.ones((1, 2)))
    np.testing.assert_array_equal(grads[0], np.outer(x[0], np.ones(2)))
    np.testing.assert_array_equal(grads[1], np.ones(2))
    np.testing.assert_array_equal(dx, np.ones((1, 2)) @ W.T)


def test_relu_dead_zone_blocks_gradient():
    W1 = np.array([[1.0, -1.0]])
    net = DenseNet([W1, np.ones((2, 1))], [np.zeros(2), np.zeros(1)], ["relu", "linear"])
    _, cache = net.forward(np.array([[2.0]]), cache=True)  # second hidden unit pre-activation is -2
    grads, _ = net.backward(cache, np.ones((1, 1)))
    assert grads[0][0, 1] == 0.0 and grads[1][1] == 0.0
    assert grads[0][0, 0] == 2.0


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("hidden", ["relu", "tanh"])
def test_densenet_grad_check(seed, hidden):
    rng = np.random.default_rng(seed)
    net = DenseNet.init([4, 6, 5, 3], rng, hidden=hidden)
    x = rng.standard_normal((7, 4))
    up = rng.standard_normal((7, 3))
    _, cache = net.forward(x, cache=True)
    grads, dx = net.backward(cache, up)
    assert grad_check(lambda: float(np.sum(net.forward(x) * up)), net.params(), grads) <= 1e-4
    assert grad_check(lambda: float(np.sum(net.forward(x) * up)), [x], [dx]) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_head_grad_check(seed):
    rng = np.random.default_rng(seed)
    head = GaussianHead.init([5, 8, 3], rng, hidden="tanh")
    x = rng.standard_normal((6, 5))
    noise = rng.standard_normal((6, 3))

    def f():
        mu, lv = head.forward(x)
        m = sample_reparam(mu, lv, noise)
        return float(np.sum(m ** 2) + np.sum(np.exp(lv) + mu * mu - lv))

    mu, lv, cache = head.forward(x, cache=True)
    m = sample_reparam(mu, lv, noise)
    dmu, dlv = sample_reparam_grad(lv, noise, 2 * m)
    grads, _ = head.backward(cache, dmu + 2 * mu, dlv + np.exp(lv) - 1.0)
    assert grad_check(f, head.params(), grads) <= 1e-4


def test_gaussian_head_clamps_log_var():
    trunk = DenseNet([np.zeros((1, 2))], [np.array([0.0, 50.0])], ["linear"])
    head = GaussianHead(trunk)
    _, lv = head.forward(np.zeros((1, 1)))
    assert lv[0, 0] == LOG_VAR_MAX
    trunk.biases[0][1] = -50.0
    _, lv = head.forward(np.zeros((1, 1)))
    assert lv[0, 0] == LOG_VAR_MIN


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_emitted_variance_in_range(bias_lv):
    d = len(bias_lv)
    trunk = DenseNet([np.zeros((1, 2 * d))], [np.array([0.0] * d + bias_lv)], ["linear"])
    _, lv = GaussianHead(trunk).forward(np.zeros((1, 1)))
    var = np.exp(lv)
    assert np.all(var >= math.exp(-10) * (1 - 1e-12)) and np.all(var <= math.exp(4) * (1 + 1e-12))


def test_sample_reparam_examples():
    assert sample_reparam([0.0], [0.0], [1.0]).tolist() == [1.0]
    assert sample_reparam([2.0], [math.log(4.0)], [1.0]).tolist() == pytest.approx([4.0], abs=1e-15)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(-10, 4))
def test_zero_noise_returns_mean_exactly(mean, lv):
    mean = np.array(mean)
    out = sample_reparam(mean, np.full_like(mean, lv), np.zeros_like(mean))
    assert np.array_equal(out, mean)  # IEEE equality; -0.0 comes back as +0.0


def test_sample_reparam_shape_mismatch():
    with pytest.raises(ConfigError):
        sample_reparam([0.0, 1.0], [0.0], [1.0])


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0]), np.array([[3.0]])]
    before = [a.copy() for a in p]
    st_ = AdamState.for_params(p, lr=0.1)
    for _ in range(3):
        adam_step(p, [np.zeros_like(a) for a in p], st_)
    for a, b in zip(p, before):
        np.testing.assert_array_equal(a, b)
    assert st_.step == 3


def test_adam_first_step_hand_computed():
    # step 1: m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps)
    lr, eps = 0.01, 1e-8
    g = np.array([0.3, -2.0, 1e-3])
    p = [np.zeros(3)]
    adam_step(p, [g], AdamState.for_params(p, lr=lr, eps=eps))
    np.testing.assert_allclose(p[0], -lr * g / (np.abs(g) + eps), rtol=1e-12)
    np.testing.assert_allclose(p[0], -lr * np.sign(g), rtol=1e-4)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = [rng.standard_normal((3, 2))]
        s = AdamState.for_params(p, lr=1e-2)
        for _ in range(5):
            adam_step(p, [rng.standard_normal((3, 2))], s)
        return p[0]
    assert run().tobytes() == run().tobytes()


def test_adam_rejects_nonfinite_without_touching_state():
    p = [np.ones(2), np.ones(3)]
    s = AdamState.for_params(p)
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.ones(2), np.array([1.0, np.nan, 0.0])], s)
    assert s.step == 0
    np.testing.assert_array_equal(p[0], np.ones(2))
    np.testing.assert_array_equal(s.m[0], np.zeros(2))


@given(st.integers(1, 20))
@settings(max_examples=20, deadline=None)
def test_adam_moments_congruent_and_step_monotone(k):
    rng = np.random.default_rng(k)
    p = [rng.standard_normal((2, 3)), rng.standard_normal(4)]
    s = AdamState.for_params(p)
    last = s.step
    for _ in range(k):
        adam_step(p, [rng.standard_normal(a.shape) for a in p], s)
        assert s.step == last + 1
        last = s.step
    assert [m.shape for m in s.m] == [a.shape for a in p] == [v.shape for v in s.v]
    assert all(np.all(np.isfinite(a)) for a in p)


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out = clip_by_global_norm(g, 1.0)
    np.testing.assert_allclose([out[0][0], out[1][0]], [0.6, 0.8])
    assert clip_by_global_norm(g, 10.0) is g


def test_grad_check_quadratic():
    x = np.array([3.0])
    assert grad_check(lambda: float(x[0] ** 2), [x], [np.array([6.0])]) < 1e-9
    assert x[0] == 3.0


def test_grad_check_catches_wrong_gradient():
    x = np.array([3.0])
    assert grad_check(lambda: float(x[0] ** 2), [x], [np.array([5.0])]) > 0.1

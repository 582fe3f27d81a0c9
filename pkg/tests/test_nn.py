import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

import phonetemp.nn as nn


def test_dense_forward_identity_weights():
    out = nn.dense_forward([1, 0], [[1, 0], [0, 1]], [0, 0], "relu")
    assert np.allclose(out, [1, 0])


def test_dense_forward_relu_clamps():
    out = nn.dense_forward([1, 1], [[-1, 0]], [0], "relu")
    assert np.allclose(out, [0])


def test_dense_forward_identity_sum():
    out = nn.dense_forward([2, 3], [[1, 1]], [0.5], "identity")
    assert np.allclose(out, [5.5])


def test_dense_forward_dimension_mismatch():
    with pytest.raises(nn.LayoutError):
        nn.dense_forward([1, 2, 3], [[1, 0], [0, 1]], [0, 0], "relu")


def test_gaussian_nll_examples():
    assert nn.gaussian_nll(20, 1, 20) == pytest.approx(0.918939, abs=1e-6)
    assert nn.gaussian_nll(20, 1, 21) == pytest.approx(1.418939, abs=1e-6)
    assert nn.gaussian_nll(20, 2, 22) == pytest.approx(2.112086, abs=1e-6)


def test_gaussian_nll_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        nn.gaussian_nll(20, 0.0, 20)
    with pytest.raises(ValueError):
        nn.gaussian_nll(20, -1.0, 20)


def test_gaussian_nll_matches_scipy_logpdf():
    rng = np.random.default_rng(0)
    mu = rng.uniform(-50, 50, 1000)
    sigma = rng.uniform(1e-3, 50, 1000)
    target = rng.uniform(-50, 50, 1000)
    ours = nn.gaussian_nll(mu, sigma, target)
    reference = -norm.logpdf(target, loc=mu, scale=sigma)
    assert np.max(np.abs(ours - reference)) < 1e-9


def test_gaussian_nll_grad_examples():
    assert nn.gaussian_nll_grad(20, 1, 20) == pytest.approx((0.0, 1.0))
    assert nn.gaussian_nll_grad(0, 1, 1) == pytest.approx((-1.0, 0.0))
    assert nn.gaussian_nll_grad(0, 2, 1) == pytest.approx((-0.25, 0.375))


def test_gaussian_nll_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(1000):
        mu = rng.uniform(-30, 30)
        sigma = rng.uniform(0.1, 20)
        target = rng.uniform(-30, 30)
        d_mu, d_sigma = nn.gaussian_nll_grad(mu, sigma, target)
        fd_mu = (nn.gaussian_nll(mu + h, sigma, target) - nn.gaussian_nll(mu - h, sigma, target)) / (2 * h)
        fd_sigma = (nn.gaussian_nll(mu, sigma + h, target) - nn.gaussian_nll(mu, sigma - h, target)) / (2 * h)
        assert d_mu == pytest.approx(fd_mu, rel=1e-5, abs=1e-8)
        assert d_sigma == pytest.approx(fd_sigma, rel=1e-5, abs=1e-8)


def _single_layer_net():
    return nn.Network(layers=(nn.Dense("lin", 1, 1),), loss="squared_error")


def test_backward_hand_chain_rule():
    net = _single_layer_net()
    params = nn.ParamVector([1.0, 0.0], nn.network_layout(net))
    grad = nn.backward(net, params, [1.0], 0.0)
    # loss = (w*x + b - t)^2 -> dL/dw = 2
    assert grad.tensor("lin.W")[0, 0] == pytest.approx(2.0)
    assert grad.tensor("lin.b")[0] == pytest.approx(2.0)


def test_backward_zero_at_minimum():
    net = _single_layer_net()
    params = nn.ParamVector([2.0, 1.0], nn.network_layout(net))
    grad = nn.backward(net, params, [1.0], 3.0)  # 2*1 + 1 == 3 exactly
    assert np.max(np.abs(grad.values)) < 1e-8


def test_backward_matches_finite_differences_estimator():
    net = nn.estimator_network()
    rng = np.random.default_rng(7)
    params = nn.init_params(net, 7)
    x = rng.normal(size=9)
    assert nn.grad_check(net, params, x, 21.0) < 1e-4


def test_backward_bitwise_deterministic():
    net = nn.estimator_network()
    params = nn.init_params(net, 3)
    x = np.random.default_rng(3).normal(size=(4, 9))
    t = np.array([20.0, 21.0, 22.0, 23.0])
    a = nn.backward(net, params, x, t).values
    b = nn.backward(net, params, x, t).values
    assert a.tobytes() == b.tobytes()


def test_backward_input_grad_matches_fd():
    net = nn.aggregator_network()
    params = nn.init_params(net, 11)
    x = np.array([20.0, 0.5, 22.0, 1.0])
    _, d_x = nn.backward(net, params, x, 21.0, want_input_grad=True)
    h = 1e-6
    for i in range(4):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        fd = (nn.network_loss(net, params, up, 21.0) - nn.network_loss(net, params, down, 21.0)) / (2 * h)
        assert d_x[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_sgd_step_examples():
    layout = nn.Layout((("w", (2,)),))
    params = nn.ParamVector([1.0, 2.0], layout)
    grads = nn.GradientVector([1.0, -1.0], layout)
    out = nn.sgd_step(params, grads, 0.1)
    assert np.allclose(out.values, [0.9, 2.1])
    assert np.array_equal(nn.sgd_step(params, nn.GradientVector([0, 0], layout), 0.5).values, params.values)
    assert np.array_equal(nn.sgd_step(params, grads, 0.0).values, params.values)


def test_sgd_step_layout_mismatch():
    a = nn.Layout((("w", (2,)),))
    b = nn.Layout((("w", (3,)),))
    with pytest.raises(nn.LayoutError):
        nn.sgd_step(nn.ParamVector([1, 2], a), nn.GradientVector([1, 2, 3], b), 0.1)


def test_adam_first_step_is_signed_lr():
    layout = nn.Layout((("w", (3,)),))
    params = nn.ParamVector([0.0, 0.0, 0.0], layout)
    grads = nn.GradientVector([100.0, -5.0, 1e3], layout)
    state = nn.make_adam(0.01, layout)
    out, state = nn.adam_step(state, params, grads)
    assert np.allclose(out.values, [-0.01, 0.01, -0.01], atol=1e-8)
    assert state.step == 1


def test_adam_zero_gradient_fresh_state_is_identity():
    layout = nn.Layout((("w", (2,)),))
    params = nn.ParamVector([1.5, -2.0], layout)
    state = nn.make_adam(0.01, layout)
    out, _ = nn.adam_step(state, params, nn.GradientVector([0.0, 0.0], layout))
    assert np.array_equal(out.values, params.values)


def test_adam_two_steps_match_scalar_reference():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    # scalar reference implementation
    p, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        g = 1.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    layout = nn.Layout((("w", (1,)),))
    params = nn.ParamVector([0.0], layout)
    state = nn.make_adam(lr, layout)
    for _ in range(2):
        params, state = nn.adam_step(state, params, nn.GradientVector([1.0], layout))
    assert params.values[0] == pytest.approx(p, abs=1e-15)


def test_grad_check_zero_parameter_network():
    net = nn.Network(layers=(), heads=(), loss="squared_error")
    params = nn.ParamVector([], nn.network_layout(net))
    assert nn.grad_check(net, params, [1.0], 0.0) == 0.0


def test_grad_check_h_bounds():
    net = _single_layer_net()
    params = nn.ParamVector([1.0, 0.0], nn.network_layout(net))
    with pytest.raises(ValueError):
        nn.grad_check(net, params, [1.0], 0.0, h=1e-3)


def test_grad_check_both_shapes_small_sweep():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        est = nn.estimator_network()
        assert nn.grad_check(est, nn.init_params(est, seed), rng.normal(size=9), 21.0) < 1e-4
        agg = nn.aggregator_network()
        x = np.abs(rng.normal(size=4)) + 0.1
        assert nn.grad_check(agg, nn.init_params(agg, seed), x, 21.0) < 1e-4


def test_param_vector_length_checked():
    layout = nn.Layout((("w", (2, 2)),))
    with pytest.raises(nn.LayoutError):
        nn.ParamVector([1.0, 2.0], layout)


def test_param_vector_values_read_only():
    layout = nn.Layout((("w", (2,)),))
    params = nn.ParamVector([1.0, 2.0], layout)
    with pytest.raises(ValueError):
        params.values[0] = 5.0


def test_init_params_within_fan_in_bound():
    net = nn.estimator_network()
    params = nn.init_params(net, 0)
    for layer in net.all_layers:
        bound = np.sqrt(1.0 / layer.in_dim)
        assert np.max(np.abs(params.tensor(f"{layer.name}.W"))) <= bound
        assert np.max(np.abs(params.tensor(f"{layer.name}.b"))) <= bound


def test_non_finite_intermediate_names_layer():
    net = _single_layer_net()
    params = nn.ParamVector([1e308, 1e308], nn.network_layout(net))
    with pytest.raises(nn.NumericalError, match="lin"):
        nn.forward(net, params, [1e308])


@given(
    mu=st.floats(-50, 50),
    sigma=st.floats(1e-3, 50),
    target=st.floats(-50, 50),
)
def test_gaussian_nll_closed_form_property(mu, sigma, target):
    expected = 0.5 * np.log(2 * np.pi) + np.log(sigma) + (target - mu) ** 2 / (2 * sigma**2)
    assert abs(nn.gaussian_nll(mu, sigma, target) - expected) < 1e-9


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_sgd_lr_zero_identity_property(values):
    layout = nn.Layout((("w", (len(values),)),))
    params = nn.ParamVector(values, layout)
    grads = nn.GradientVector(np.ones(len(values)), layout)
    assert np.array_equal(nn.sgd_step(params, grads, 0.0).values, params.values)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprbfn import net
from mprbfn.net import (
    KERNELS,
    Activation,
    Adam,
    DenseLayer,
    RbfLayer,
    TrainConfig,
    VectorRbfLayer,
    adam_step,
    group_weights_from_data,
    kernel_eval,
    weighted_mse,
)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_param_grad(layers, x, gy, layer, name, h=1e-6):
    """Central differences of <gy, forward(x)> w.r.t. one parameter array."""
    p = layers[layer].params[name]
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = np.sum(gy * net.forward(layers, x)[0])
        p[idx] = old - h
        dn = np.sum(gy * net.forward(layers, x)[0])
        p[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_at_zero_is_one(kernel):
    assert kernel_eval(kernel, 0.7, 0.0) == 1.0


def test_kernel_examples():
    assert kernel_eval("gaussian", 1.0, 1.0) == pytest.approx(math.exp(-1))
    assert kernel_eval("gaussian", 1.0, 1.0) == pytest.approx(0.36788, abs=1e-5)
    assert kernel_eval("inv_quadratic", 1.0, 1.0) == 0.5
    assert kernel_eval("inv_multiquadratic", 1.0, 1.0) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ValueError):
        kernel_eval("gaussian", 0.0, 1.0)
    with pytest.raises(ValueError):
        kernel_eval("gaussian", 1.0, -1.0)
    with pytest.raises(ValueError):
        kernel_eval("cauchy", 1.0, 1.0)


@settings(max_examples=50)
@given(st.sampled_from(KERNELS), st.floats(0.01, 10), st.floats(0, 50))
def test_kernel_in_unit_interval_and_decreasing(kernel, eps, r):
    a, b = kernel_eval(kernel, eps, r), kernel_eval(kernel, eps, r + 0.1)
    assert 0 <= b <= a <= 1


def test_dense_identity_and_zero():
    layer = DenseLayer(3, 3)
    layer.params["weight"] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(layer.forward(x)[0], x)
    layer.params["weight"][:] = 0
    assert np.all(layer.forward(x)[0] == 0)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((2, 4)))


def test_single_neuron_rbf_at_centre():
    rbf = RbfLayer(1)
    out = DenseLayer(1, 4)
    z = rbf.params["centers"].reshape(1, 1).copy()
    y, _ = net.forward([rbf, out], z)
    np.testing.assert_allclose(y[0], out.params["weight"][:, 0])


def test_linear_gradient_closed_form():
    rng = np.random.default_rng(0)
    layer = DenseLayer(4, 3, rng=rng)
    q = rng.normal(size=(1, 4))
    y = rng.normal(size=(1, 3))
    pred, cache = layer.forward(q)
    grads, _ = layer.backward(cache, pred - y)
    np.testing.assert_allclose(grads["weight"], (pred - y).T @ q, atol=1e-14)


@pytest.mark.parametrize("kernel", KERNELS)
def test_eps_gradient_vanishes_at_centre(kernel):
    rbf = RbfLayer(3, kernel=kernel)
    z = rbf.params["centers"][None, :].copy()
    _, cache = rbf.forward(z)
    grads, gx = rbf.backward(cache, np.ones((1, 3)))
    assert grads["eps"][0] == 0.0
    assert np.all(gx == 0.0)


@pytest.mark.parametrize("kernel", KERNELS)
@pytest.mark.parametrize("shared", [True, False])
def test_scalar_rbf_stack_gradients(kernel, shared):
    rng = np.random.default_rng(1)
    layers = [DenseLayer(5, 6, bias=True, rng=rng), RbfLayer(6, kernel, shared_eps=shared, rng=rng),
              DenseLayer(6, 4, bias=True, rng=rng)]
    x = rng.normal(size=(7, 5))
    gy = rng.normal(size=(7, 4))
    _, caches = net.forward(layers, x)
    grads, gx = net.backward(layers, caches, gy)
    for i, layer in enumerate(layers):
        for name in layer.params:
            assert rel_err(grads[i][name], fd_param_grad(layers, x, gy, i, name)) <= 1e-7


@pytest.mark.parametrize("kernel", KERNELS)
def test_vector_rbf_gradients(kernel):
    rng = np.random.default_rng(2)
    layers = [VectorRbfLayer(5, 6, kernel, rng=rng, eps=0.5), DenseLayer(6, 3, rng=rng)]
    x = rng.normal(size=(4, 5))
    gy = rng.normal(size=(4, 3))
    _, caches = net.forward(layers, x)
    grads, gx = net.backward(layers, caches, gy)
    for i, layer in enumerate(layers):
        for name in layer.params:
            assert rel_err(grads[i][name], fd_param_grad(layers, x, gy, i, name)) <= 1e-7
    h = 1e-6
    fd_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd_x[idx] = (np.sum(gy * net.forward(layers, x + e)[0]) - np.sum(gy * net.forward(layers, x - e)[0])) / (2 * h)
    assert rel_err(gx, fd_x) <= 1e-7


@pytest.mark.parametrize("name", ["tanh", "sigmoid"])
def test_activation_gradient(name):
    rng = np.random.default_rng(3)
    layers = [DenseLayer(3, 5, rng=rng), Activation(name), DenseLayer(5, 2, rng=rng)]
    x = rng.normal(size=(4, 3))
    gy = rng.normal(size=(4, 2))
    _, caches = net.forward(layers, x)
    grads, _ = net.backward(layers, caches, gy)
    assert grads[1] == {}
    assert rel_err(grads[0]["weight"], fd_param_grad(layers, x, gy, 0, "weight")) <= 1e-7
    with pytest.raises(ValueError):
        Activation("relu")


def test_weighted_mse_examples():
    t = np.random.default_rng(0).normal(size=(2, 31, 5))
    assert weighted_mse(t, t) == 0.0
    p = np.zeros((1, 1, 5))
    q = p.copy()
    q[0, 0, 2] = 3.0
    assert weighted_mse(q, p) == pytest.approx(9.0)
    # two groups by hand: position mean over (x, y), orientation over theta
    q = p.copy()
    q[0, 0, 0], q[0, 0, 1], q[0, 0, 4] = 1.0, 3.0, 2.0
    w = {"position": 0.5, "velocity": 1.0, "steering": 1.0, "orientation": 0.25}
    assert weighted_mse(q, p, w) == pytest.approx(0.5 * (1 + 9) / 2 + 0.25 * 4)
    with pytest.raises(ValueError):
        weighted_mse(np.zeros((1, 2, 5)), np.zeros((1, 3, 5)))


def test_weighted_mse_gradient():
    rng = np.random.default_rng(4)
    p, t = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    w = {"position": 0.3, "velocity": 2.0, "steering": 0.0, "orientation": 1.5}
    _, g = weighted_mse(p, t, w, return_grad=True)
    h = 1e-6
    fd = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        e = np.zeros_like(p)
        e[idx] = h
        fd[idx] = (weighted_mse(p + e, t, w) - weighted_mse(p - e, t, w)) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-8)
    assert np.all(g[..., 3] == 0)


def test_group_weights():
    traj = np.zeros((2, 3, 5))
    traj[1, :, 0] = 10.0
    traj[1, :, 2] = 2.0
    w = group_weights_from_data(traj)
    assert w["position"] == pytest.approx(0.01)
    assert w["velocity"] == pytest.approx(0.25)
    assert w["orientation"] == 1.0  # constant channel
    assert group_weights_from_data(traj, include_steering=False)["steering"] == 0.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig().to_dict()["learning_rate"] == 1e-3


def test_adam_zero_gradient():
    cfg = TrainConfig()
    p = {"w": np.array([1.0, -2.0])}
    m0 = {"w": (np.array([0.5, 0.5]), np.array([1.0, 1.0]))}
    new, mom = adam_step(p, {"w": np.zeros(2)}, m0, 3, cfg)
    m, v = mom["w"]
    np.testing.assert_allclose(m, 0.45)
    np.testing.assert_allclose(v, 0.999)
    # moments decay but a zero gradient still moves along the remaining momentum
    fresh, _ = adam_step(p, {"w": np.zeros(2)}, {}, 1, cfg)
    np.testing.assert_array_equal(fresh["w"], p["w"])
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, {}, 0, cfg)


def test_adam_first_step_is_sign():
    cfg = TrainConfig()
    g = np.array([3.0, -0.2, 1e-3])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, {}, 1, cfg)
    np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_two_step_trace():
    cfg = TrainConfig(learning_rate=0.1)
    g = 2.0
    p, mom = {"w": np.array([1.0])}, {}
    p, mom = adam_step(p, {"w": np.array([g])}, mom, 1, cfg)
    p, mom = adam_step(p, {"w": np.array([g])}, mom, 2, cfg)
    m1, v1 = 0.1 * g, 0.001 * g * g
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    x = 1.0 - 0.1 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    x -= 0.1 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert p["w"][0] == pytest.approx(x, abs=1e-12)


def test_adam_decreases_loss_on_smooth_target():
    rng = np.random.default_rng(5)
    layers = [DenseLayer(2, 8, rng=rng), RbfLayer(8, rng=rng), DenseLayer(8, 1, rng=rng)]
    x = rng.uniform(-1, 1, size=(32, 2))
    y = np.sin(x[:, :1]) + x[:, 1:] ** 2
    opt = Adam(layers, TrainConfig(learning_rate=1e-4))
    losses = []
    for _ in range(10):
        pred, caches = net.forward(layers, x)
        losses.append(float(np.mean((pred - y) ** 2)))
        grads, _ = net.backward(layers, caches, 2 * (pred - y) / pred.size)
        opt.step(grads)
    assert all(b <= a for a, b in zip(losses, losses[1:]))

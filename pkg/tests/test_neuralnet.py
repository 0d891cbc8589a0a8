"""Dense network forward/backward/Adam checks against hand math."""

import math

import numpy as np
import pytest

from qflearn.neuralnet import (
    LINEAR,
    RELU,
    SOFTMAX,
    AdamConfig,
    DenseLayer,
    DenseNetwork,
    ParameterGradient,
    adam_step,
    backward,
    forward,
    glorot_init,
    load_network,
    save_network,
)


def scalar_probe_gradient(net, x, probe):
    """Backprop gradient of sum(probe * net(x)) as one flat vector."""
    out, tape = forward(net, x)
    grad = backward(net, tape, np.broadcast_to(probe, out.shape).copy())
    return grad.flatten(), float((out * probe).sum())


def finite_difference(net, x, probe, index, h=1e-6):
    flat = net.flatten_params()
    bumped = flat.copy()
    bumped[index] = flat[index] + h
    net.set_flat_params(bumped)
    up, _ = forward(net, x)
    bumped[index] = flat[index] - h
    net.set_flat_params(bumped)
    down, _ = forward(net, x)
    net.set_flat_params(flat)
    return float(((up - down) * probe).sum()) / (2.0 * h)


def random_network(rng, softmax_head=False):
    depth = int(rng.integers(2, 4))
    dims = [int(d) for d in rng.integers(2, 7, size=depth + 1)]
    acts = [RELU] * (depth - 1) + [SOFTMAX if softmax_head else LINEAR]
    return glorot_init(dims, acts, rng)


def test_backward_matches_finite_differences():
    """100 random parameter probes across random small networks, rel err < 1e-4."""
    rng = np.random.default_rng(101)
    checked = 0
    worst = 0.0
    while checked < 100:
        net = random_network(rng, softmax_head=bool(rng.integers(0, 2)))
        x = rng.normal(size=(5, net.in_dim))
        probe = rng.normal(size=(net.out_dim,))
        analytic, _ = scalar_probe_gradient(net, x, probe)
        for index in rng.choice(net.param_count(), size=4, replace=False):
            fd = finite_difference(net, x, probe, int(index))
            scale = max(abs(fd), abs(analytic[index]), 1e-8)
            worst = max(worst, abs(fd - analytic[index]) / scale)
            checked += 1
    assert worst < 1e-4, f"worst relative error {worst:.3e}"


def test_relu_masks_negative_preactivations():
    layer = DenseLayer(np.array([[1.0], [-1.0]]), np.zeros(2), RELU)
    net = DenseNetwork([layer])
    out, _ = forward(net, np.array([[2.0]]))
    np.testing.assert_allclose(out, [[2.0, 0.0]])


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(7)
    net = glorot_init([3, 8, 4], [RELU, SOFTMAX], rng)
    out, _ = forward(net, rng.normal(size=(11, 3)))
    assert np.all(out > 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_is_shift_invariant_and_stable():
    layer = DenseLayer(np.eye(3), np.zeros(3), SOFTMAX)
    net = DenseNetwork([layer])
    out, _ = forward(net, np.array([[1000.0, 1001.0, 999.0]]))
    assert np.all(np.isfinite(out))
    ref = np.exp([0.0, 1.0, -1.0])
    np.testing.assert_allclose(out[0], ref / ref.sum(), rtol=1e-12)


def test_linear_layer_is_exact_affine_map():
    w = np.array([[2.0, -1.0], [0.5, 3.0]])
    b = np.array([1.0, -2.0])
    net = DenseNetwork([DenseLayer(w, b, LINEAR)])
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    out, _ = forward(net, x)
    np.testing.assert_allclose(out, x @ w.T + b)


def test_glorot_bounds_and_zero_biases():
    rng = np.random.default_rng(3)
    net = glorot_init([16, 30, 30, 2], [RELU, RELU, LINEAR], rng)
    for layer in net.layers:
        bound = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        assert np.all(np.abs(layer.weights) <= bound)
        assert np.all(layer.biases == 0.0)
    # the draw actually spreads over the interval rather than collapsing
    first = net.layers[0].weights
    assert first.max() > 0.5 * math.sqrt(6.0 / 46)
    assert first.min() < -0.5 * math.sqrt(6.0 / 46)


def test_softmax_rejected_in_hidden_position():
    with pytest.raises(ValueError):
        DenseNetwork(
            [
                DenseLayer(np.eye(2), np.zeros(2), SOFTMAX),
                DenseLayer(np.eye(2), np.zeros(2), LINEAR),
            ]
        )


def test_dimension_chain_validated():
    with pytest.raises(ValueError):
        DenseNetwork(
            [
                DenseLayer(np.zeros((3, 2)), np.zeros(3), RELU),
                DenseLayer(np.zeros((2, 4)), np.zeros(2), LINEAR),
            ]
        )


def test_flatten_set_roundtrip():
    rng = np.random.default_rng(11)
    net = glorot_init([4, 5, 3], [RELU, LINEAR], rng)
    flat = net.flatten_params()
    assert flat.shape == (net.param_count(),)
    twin = glorot_init([4, 5, 3], [RELU, LINEAR], np.random.default_rng(999))
    twin.set_flat_params(flat)
    np.testing.assert_array_equal(twin.flatten_params(), flat)
    for a, b in zip(net.layers, twin.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.biases, b.biases)


def test_copy_is_independent():
    rng = np.random.default_rng(12)
    net = glorot_init([3, 4, 2], [RELU, LINEAR], rng)
    net.adam_t = 5
    dup = net.copy()
    dup.layers[0].weights += 1.0
    dup.adam_t = 9
    assert net.adam_t == 5
    assert not np.allclose(net.layers[0].weights, dup.layers[0].weights)


def test_adam_first_step_matches_hand_formula():
    """With zero moments, step 1 moves each coordinate by lr*g/(|g|+eps')."""
    w = np.array([[1.0, -2.0]])
    net = DenseNetwork([DenseLayer(w.copy(), np.array([0.5]), LINEAR)])
    grad = ParameterGradient([(np.array([[0.3, -0.7]]), np.array([0.1]))])
    cfg = AdamConfig(learning_rate=0.01)
    adam_step(net, grad, cfg)
    # bias-corrected m_hat = g, v_hat = g^2, so the update is lr * sign(g)
    # up to the epsilon in the denominator
    g = np.array([[0.3, -0.7]])
    expect_w = w - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(net.layers[0].weights, expect_w, rtol=1e-9)
    expect_b = 0.5 - 0.01 * 0.1 / (0.1 + 1e-8)
    np.testing.assert_allclose(net.layers[0].biases, [expect_b], rtol=1e-9)
    assert net.adam_t == 1


def test_adam_two_steps_match_reference_recursion():
    rng = np.random.default_rng(21)
    net = glorot_init([2, 3], [LINEAR], rng)
    cfg = AdamConfig(learning_rate=0.05, beta1=0.8, beta2=0.95, epsilon=1e-8)
    flat0 = net.flatten_params()
    g1 = rng.normal(size=flat0.shape)
    g2 = rng.normal(size=flat0.shape)

    def as_grad(flat):
        pieces = []
        pos = 0
        for layer in net.layers:
            n = layer.weights.size
            dw = flat[pos : pos + n].reshape(layer.weights.shape)
            pos += n
            db = flat[pos : pos + layer.biases.size]
            pos += layer.biases.size
            pieces.append((dw.copy(), db.copy()))
        return ParameterGradient(pieces)

    adam_step(net, as_grad(g1), cfg)
    adam_step(net, as_grad(g2), cfg)

    m = np.zeros_like(flat0)
    v = np.zeros_like(flat0)
    theta = flat0.copy()
    for t, g in ((1, g1), (2, g2)):
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        m_hat = m / (1.0 - 0.8**t)
        v_hat = v / (1.0 - 0.95**t)
        theta = theta - 0.05 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(net.flatten_params(), theta, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    rng = np.random.default_rng(31)
    net = glorot_init([2, 2], [LINEAR], rng)
    grad = ParameterGradient([(np.array([[np.nan, 0.0], [0.0, 0.0]]), np.zeros(2))])
    with pytest.raises(ValueError):
        adam_step(net, grad, AdamConfig(learning_rate=0.01))


def test_gradient_norm_and_scaling_helpers():
    grad = ParameterGradient([(np.array([[3.0]]), np.array([4.0]))])
    assert grad.norm() == pytest.approx(5.0)
    doubled = grad.scaled(2.0)
    assert doubled.norm() == pytest.approx(10.0)
    total = grad.add(doubled)
    np.testing.assert_allclose(total.flatten(), [9.0, 12.0])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(41)
    net = glorot_init([16, 30, 30, 2], [RELU, RELU, LINEAR], rng)
    path = tmp_path / "net.json"
    save_network(net, str(path))
    back = load_network(str(path))
    np.testing.assert_array_equal(back.flatten_params(), net.flatten_params())
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]
    # optimizer state restarts cleanly on load
    assert back.adam_t == 0


def test_backward_batch_sums_per_sample_gradients():
    """Gradient of a 2-sample batch equals the sum of single-sample gradients."""
    rng = np.random.default_rng(51)
    net = glorot_init([3, 5, 2], [RELU, LINEAR], rng)
    x = rng.normal(size=(2, 3))
    probe = rng.normal(size=(2, 2))
    out, tape = forward(net, x)
    full = backward(net, tape, probe.copy()).flatten()
    parts = np.zeros_like(full)
    for k in range(2):
        out_k, tape_k = forward(net, x[k : k + 1])
        parts += backward(net, tape_k, probe[k : k + 1].copy()).flatten()
    np.testing.assert_allclose(full, parts, rtol=1e-12)

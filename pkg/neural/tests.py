import numpy as np
import pytest

from core.exceptions import DomainError, ShapeError
from neural.network import (
    DenseNet,
    Layer,
    backward,
    forward,
    init_dense_net,
    net_from_bytes,
    net_to_bytes,
)
from neural.optim import AdamState, adam_step, clip_grad_norm, learning_rate


def finite_difference_grads(net, x, upstream, h=1e-4):
    """Central differences of sum(upstream * forward(net, x)) w.r.t. every parameter."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            saved = p[idx]
            p[idx] = saved + h
            plus = np.sum(upstream * forward(net, x))
            p[idx] = saved - h
            minus = np.sum(upstream * forward(net, x))
            p[idx] = saved
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


class TestForward:
    """Forward pass."""

    def test_zero_network_outputs_zero(self):
        net = DenseNet(
            [
                Layer(np.zeros((3, 4)), np.zeros(3), "tanh"),
                Layer(np.zeros((2, 3)), np.zeros(2), "identity"),
            ]
        )
        np.testing.assert_array_equal(forward(net, np.ones(4)), np.zeros(2))

    def test_identity_layer_adds_bias(self):
        bias = np.array([0.5, -1.0, 2.0])
        net = DenseNet([Layer(np.eye(3), bias, "identity")])
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(forward(net, x), x + bias)

    def test_hand_evaluated_two_layer_net(self):
        net = DenseNet(
            [
                Layer(np.array([[0.5, -1.0], [1.0, 0.25]]), np.array([0.0, 0.1]), "tanh"),
                Layer(np.array([[2.0, -1.0]]), np.array([0.5]), "identity"),
            ]
        )
        # hidden = tanh([-1.5, 1.6]); out = 2*tanh(-1.5) - tanh(1.6) + 0.5
        assert forward(net, np.array([1.0, 2.0]))[0] == pytest.approx(-2.2319650616, abs=1e-9)

    def test_batch_matches_rows(self):
        net = init_dense_net([5, 8, 3], np.random.default_rng(0))
        batch = np.random.default_rng(1).normal(size=(4, 5))
        out = forward(net, batch)
        for row, expected in zip(batch, out):
            np.testing.assert_allclose(forward(net, row), expected)

    def test_dimension_mismatch(self):
        net = init_dense_net([5, 8, 3], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(net, np.zeros(4))

    def test_layers_must_chain_and_end_linear(self):
        with pytest.raises(ShapeError):
            DenseNet([Layer(np.zeros((3, 4)), np.zeros(3), "tanh"), Layer(np.zeros((2, 2)), np.zeros(2), "identity")])
        with pytest.raises(DomainError):
            DenseNet([Layer(np.zeros((3, 4)), np.zeros(3), "tanh")])

    def test_deterministic(self):
        a = init_dense_net([6, 16, 4], np.random.default_rng(7))
        b = init_dense_net([6, 16, 4], np.random.default_rng(7))
        x = np.linspace(-1, 1, 6)
        assert np.array_equal(forward(a, x), forward(b, x))


class TestBackward:
    """Reverse-mode gradients."""

    def test_zero_upstream_gives_zero_gradients(self):
        net = init_dense_net([4, 6, 2], np.random.default_rng(3))
        grads, dx = backward(net, np.ones(4), np.zeros(2))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(dx == 0)

    def test_linear_layer_weight_gradient_is_outer_product(self):
        net = DenseNet([Layer(np.eye(3), np.zeros(3), "identity")])
        x = np.array([1.0, -2.0, 0.5])
        upstream = np.array([0.3, 0.0, -1.0])
        grads, dx = backward(net, x, upstream)
        np.testing.assert_allclose(grads[0], np.outer(upstream, x))
        np.testing.assert_allclose(grads[1], upstream)
        np.testing.assert_allclose(dx, upstream)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        # same layout as the velocity network: obs(4) + chunk(3x2) + tau(3) -> chunk(6)
        net = init_dense_net([13, 16, 16, 6], rng)
        for p in net.parameters():
            p += rng.normal(scale=0.1, size=p.shape)
        x = rng.normal(size=(4, 13))
        upstream = rng.normal(size=(4, 6))
        analytic, _ = backward(net, x, upstream)
        numeric = finite_difference_grads(net, x, upstream)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_input_gradient(self):
        rng = np.random.default_rng(11)
        net = init_dense_net([3, 5, 2], rng)
        x = rng.normal(size=3)
        upstream = rng.normal(size=2)
        _, dx = backward(net, x, upstream)
        h = 1e-5
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            numeric = (np.sum(upstream * forward(net, x + e)) - np.sum(upstream * forward(net, x - e))) / (2 * h)
            assert dx[i] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_upstream_shape_mismatch(self):
        net = init_dense_net([3, 5, 2], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            backward(net, np.zeros(3), np.zeros(3))


class TestAdam:
    """Optimizer updates."""

    def test_zero_gradient_leaves_params(self):
        params = [np.array([1.0, -2.0])]
        state = AdamState.for_parameters(params, lr=0.1)
        adam_step(state, params, [np.zeros(2)])
        np.testing.assert_array_equal(params[0], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params = [np.array([0.0])]
        state = AdamState.for_parameters(params, lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8)
        adam_step(state, params, [np.array([1.0])])
        assert params[0][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)

    def test_constant_gradient_decreases_monotonically(self):
        params = [np.array([0.0])]
        state = AdamState.for_parameters(params, lr=0.01)
        history = []
        for _ in range(3):
            adam_step(state, params, [np.array([2.0])])
            history.append(params[0][0])
        assert history[0] > history[1] > history[2]
        assert state.step == 3

    def test_decoupled_weight_decay(self):
        params = [np.array([2.0])]
        state = AdamState.for_parameters(params, lr=0.1, weight_decay=0.5)
        adam_step(state, params, [np.zeros(1)])
        assert params[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_shape_mismatch(self):
        params = [np.zeros(2)]
        state = AdamState.for_parameters(params)
        with pytest.raises(ShapeError):
            adam_step(state, params, [np.zeros(3)])

    def test_clip_grad_norm(self):
        grads = [np.array([3.0]), np.array([4.0])]
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.sqrt(grads[0] ** 2 + grads[1] ** 2)[0] == pytest.approx(1.0)

    def test_learning_rate_schedule(self):
        assert learning_rate(1e-3, 0, warmup_steps=10) == pytest.approx(1e-4)
        assert learning_rate(1e-3, 50) == 1e-3
        assert learning_rate(1e-3, 100, schedule="cosine", total_steps=100) == pytest.approx(0.0, abs=1e-12)


class TestCheckpoint:
    """FCNET1 serialization."""

    def test_layout_and_reload(self):
        net = init_dense_net([4, 3, 2], np.random.default_rng(5))
        blob = net_to_bytes(net)
        assert blob[:6] == b"FCNET1"
        # layer count, 3 dims, 2 activation codes
        assert len(blob) == 6 + 4 + 12 + 8 + 4 * net.num_parameters()
        loaded, offset = net_from_bytes(blob)
        assert offset == len(blob)
        for a, b in zip(net.parameters(), loaded.parameters()):
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)
        assert [l.activation for l in loaded.layers] == ["tanh", "identity"]

    def test_bad_magic_and_truncation(self):
        blob = net_to_bytes(init_dense_net([4, 3, 2], np.random.default_rng(5)))
        with pytest.raises(ShapeError):
            net_from_bytes(b"XXXXXX" + blob[6:])
        with pytest.raises(ShapeError):
            net_from_bytes(blob[:-4])

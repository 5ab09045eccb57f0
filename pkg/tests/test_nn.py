"""Network construction, forward pass, gradients and SGD."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from budgeted_broadcast.errors import ConfigError, NumericalError, ShapeError
from budgeted_broadcast.nn import (
    Batch,
    MaskedLayer,
    Network,
    evaluate_accuracy,
    forward,
    init_network,
    loss,
    loss_and_grads,
    train_step,
)
from budgeted_broadcast.tasks import xor_corners


def finite_difference_error(net, batch, eps=1e-5):
    """Largest relative gap between backprop and central differences."""
    _, grads = loss_and_grads(net, batch)
    worst = 0.0
    for layer, (dw, db) in zip(net.layers, grads):
        for arr, g in ((layer.weights, dw), (layer.bias, db)):
            for idx in np.ndindex(arr.shape):
                saved = arr[idx]
                arr[idx] = saved + eps
                up = loss(net, batch)
                arr[idx] = saved - eps
                down = loss(net, batch)
                arr[idx] = saved
                if arr is layer.weights and layer.mask[idx] == 0:
                    numeric = 0.0
                else:
                    numeric = (up - down) / (2 * eps)
                scale = max(abs(numeric), abs(g[idx]), 1e-7)
                worst = max(worst, abs(numeric - g[idx]) / scale)
    return worst


def random_toy(seed, sizes=(3, 3, 1), n=6):
    rng = np.random.default_rng(seed)
    net = init_network(sizes, seed)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0, 0.3, layer.bias.shape)
        layer.rescale[:] = rng.uniform(0.5, 2.0, layer.rescale.shape)
    batch = Batch(rng.normal(size=(n, sizes[0])), rng.integers(0, 2, n))
    return net, batch


class TestInit:
    def test_xor_preset_is_dense(self):
        net = init_network([2, 64, 128, 1], seed=7)
        assert net.sizes == [2, 64, 128, 1]
        assert np.all(net.layers[1].fan_out() == 128)
        for layer in net.layers:
            assert np.all(layer.mask == 1) and np.all(layer.rescale == 1)

    def test_single_layer(self):
        net = init_network([2, 2], seed=3)
        assert len(net.layers) == 1
        np.testing.assert_array_equal(net.layers[0].mask, np.ones((2, 2)))

    def test_deterministic(self):
        a = init_network([4, 8, 1], seed=11)
        b = init_network([4, 8, 1], seed=11)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weights, lb.weights)

    @pytest.mark.parametrize("sizes", [[], [3], [2, 0, 1], [2, -1]])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ConfigError):
            init_network(sizes, seed=0)


class TestForward:
    def test_zero_network(self):
        net = init_network([3, 4, 1], seed=0)
        for layer in net.layers:
            layer.weights[:] = 0
        acts = forward(net, np.ones((5, 3)))
        assert np.all(acts[1] == 0)
        np.testing.assert_allclose(acts[-1], 0.5)

    def test_zero_mask_leaves_bias(self):
        net = init_network([3, 4, 1], seed=0)
        net.layers[0].mask[:] = 0
        net.layers[0].bias[:] = [0.5, -0.5, 1.0, 0.0]
        acts = forward(net, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(acts[1], np.tile([0.5, 0.0, 1.0, 0.0], (5, 1)))

    def test_rescale_doubles_channel(self):
        net = init_network([3, 1], seed=2)
        x = np.random.default_rng(1).normal(size=(4, 3))
        base = x @ net.layers[0].effective()
        net.layers[0].rescale[:] = 2.0
        np.testing.assert_allclose(x @ net.layers[0].effective(), 2 * base)

    def test_shape_mismatch(self):
        net = init_network([3, 2, 1], seed=0)
        with pytest.raises(ShapeError):
            forward(net, np.ones((2, 4)))

    def test_pure(self):
        net = init_network([2, 16, 1], seed=5)
        batch = xor_corners()
        a, b = forward(net, batch), forward(net, batch)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestTraining:
    def test_masked_entries_frozen(self):
        net = init_network([2, 8, 1], seed=1)
        rng = np.random.default_rng(0)
        net.layers[0].mask[:] = rng.integers(0, 2, net.layers[0].mask.shape)
        before = net.layers[0].weights.copy()
        train_step(net, xor_corners(), lr=0.5)
        frozen = net.layers[0].mask == 0
        np.testing.assert_array_equal(net.layers[0].weights[frozen], before[frozen])

    def test_loss_decreases_on_separable_pair(self):
        net = init_network([2, 1], seed=0)
        batch = Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        first = train_step(net, batch, lr=0.1)
        assert loss(net, batch) < first

    def test_returns_pre_update_loss(self):
        net = init_network([2, 4, 1], seed=0)
        batch = xor_corners()
        expected = loss(net, batch)
        assert train_step(net, batch, lr=0.1) == expected

    def test_nonpositive_lr(self):
        with pytest.raises(ConfigError):
            train_step(init_network([2, 1], 0), xor_corners(), lr=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_step(self):
        net = init_network([2, 1], seed=0)
        net.layers[0].weights[:] = np.nan
        net.step = 17
        with pytest.raises(NumericalError) as info:
            train_step(net, xor_corners(), lr=0.1)
        assert info.value.step == 17

    def test_gradient_3x3(self):
        net, batch = random_toy(0, (3, 3, 1))
        assert finite_difference_error(net, batch) < 1e-4

    def test_gradient_with_mask(self):
        net, batch = random_toy(1, (3, 4, 2, 1))
        net.layers[1].mask[0, :] = 0
        assert finite_difference_error(net, batch) < 1e-4

    @given(st.integers(0, 2**31 - 1))
    def test_masked_weights_frozen_property(self, seed):
        rng = np.random.default_rng(seed)
        net = init_network([3, 5, 1], seed)
        for layer in net.layers:
            layer.mask[:] = rng.integers(0, 2, layer.mask.shape)
        before = [(l.weights * (1 - l.mask)).copy() for l in net.layers]
        batch = Batch(rng.normal(size=(8, 3)), rng.integers(0, 2, 8))
        train_step(net, batch, lr=rng.uniform(0.01, 1.0))
        for layer, old in zip(net.layers, before):
            np.testing.assert_array_equal(layer.weights * (1 - layer.mask), old)


class TestAccuracy:
    def test_perfect_xor(self):
        net = Network([
            MaskedLayer.dense(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([0.0, -1.0])),
            MaskedLayer.dense(np.array([[10.0], [-20.0]]), np.array([-5.0])),
        ])
        assert evaluate_accuracy(net, xor_corners()) == 1.0

    def test_constant_half_predicts_zero(self):
        net = init_network([2, 1], seed=0)
        net.layers[0].weights[:] = 0
        batch = Batch(np.zeros((10, 2)), np.array([0] * 7 + [1] * 3))
        assert evaluate_accuracy(net, batch) == pytest.approx(0.7)

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(4)
        net = init_network([5, 8, 1], seed=4)
        batch = Batch(rng.choice([-1.0, 1.0], size=(10_000, 5)), rng.integers(0, 2, 10_000))
        assert abs(evaluate_accuracy(net, batch) - 0.5) < 0.03

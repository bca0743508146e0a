import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autocount import tinynet
from gradcheck import check_batchnorm, check_conv, check_cross_entropy


def conv(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float32)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return tinynet.ConvLayer(weight, bias)


def bn(c, gamma=1.0, beta=0.0, eps=1e-5):
    layer = tinynet.BatchNormLayer.init(c, eps=eps)
    layer.gamma = np.full(c, gamma, dtype=np.float32)
    layer.beta = np.full(c, beta, dtype=np.float32)
    return layer


class TestConv:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        y = tinynet.conv2d_forward(x, conv(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(y, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
        y = tinynet.conv2d_forward(x, conv(np.zeros((2, 3, 3, 3))))
        assert y.shape == (2, 2, 4, 5)
        assert not y.any()

    def test_hand_cross_correlation(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = tinynet.conv2d_forward(x, conv(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(y[0, 0], [[10, 10], [10, 10]])

    def test_asymmetric_kernel_is_correlation_not_convolution(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 2] = 1.0  # top-right tap
        y = tinynet.conv2d_forward(x, conv(w))
        # output(y, x) = sum w(i, j) in(y + i - 1, x + j - 1): the impulse lands bottom-left
        assert y[0, 0, 2, 0] == 1.0 and y.sum() == 1.0

    @given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3, 5]))
    @settings(max_examples=20, deadline=None)
    def test_same_padding_keeps_spatial_dims(self, h, w, k):
        rng = np.random.default_rng(h * 10 + w)
        layer = tinynet.ConvLayer.init(2, 3, k, rng)
        assert tinynet.conv2d_forward(rng.normal(size=(1, 2, h, w)), layer).shape == (1, 3, h, w)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            tinynet.conv2d_forward(np.zeros((1, 2, 3, 3)), conv(np.ones((1, 3, 1, 1))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            conv(np.ones((1, 1, 2, 2)))

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 4, 4))
        layer = tinynet.ConvLayer.init(2, 3, 3, rng)
        for g in tinynet.conv2d_backward(x, layer, np.zeros((1, 3, 4, 4))):
            assert not np.any(g)

    def test_backward_scalar_chain_rule(self):
        x = np.array([[[[2.5]]]])
        gw = tinynet.conv2d_backward(x, conv([[[[0.7]]]]), np.array([[[[-3.0]]]]))[1]
        assert gw[0, 0, 0, 0] == pytest.approx(2.5 * -3.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert check_conv(np.random.default_rng(seed)) < 1e-3


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        y = tinynet.batchnorm_forward(np.full((1, 2, 3, 3), 7.0), bn(2), training=True)
        np.testing.assert_allclose(y, 0.0, atol=1e-6)

    def test_constant_channel_with_shift(self):
        y = tinynet.batchnorm_forward(np.full((1, 1, 3, 3), -2.0), bn(1, beta=5.0), training=True)
        np.testing.assert_allclose(y, 5.0, atol=1e-6)

    def test_unit_variance_channel_unchanged(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
        y = tinynet.batchnorm_forward(x, bn(1, eps=1e-12), training=True)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_eval_mode_uses_running_stats(self):
        layer = bn(1)
        layer.running_mean = np.array([1.0], dtype=np.float32)
        layer.running_var = np.array([4.0], dtype=np.float32)
        y = tinynet.batchnorm_forward(np.full((1, 1, 1, 1), 5.0), layer, training=False)
        assert y[0, 0, 0, 0] == pytest.approx(4.0 / math.sqrt(4.0 + 1e-5))

    def test_running_stats_update(self):
        layer = bn(1)
        x = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
        tinynet.batchnorm_forward(x, layer, training=True)
        # mean 1, unbiased variance 2, momentum 0.1 from (0, 1)
        assert layer.running_mean[0] == pytest.approx(0.1)
        assert layer.running_var[0] == pytest.approx(0.9 + 0.2)
        tinynet.batchnorm_forward(x, layer, training=True, update_stats=False)
        assert layer.running_mean[0] == pytest.approx(0.1)

    def test_backward_zero_grad(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 2, 2))
        for g in tinynet.batchnorm_backward(x, bn(3), np.zeros_like(x)):
            assert not np.any(g)

    def test_beta_only_path_sums_to_zero(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 3, 3))
        # a grad_out that is constant per channel reaches the output only through beta
        g = np.broadcast_to(rng.normal(size=(1, 4, 1, 1)), x.shape).copy()
        gx = tinynet.batchnorm_backward(x, bn(4), g)[0]
        np.testing.assert_allclose(gx.sum(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(gx, 0.0, atol=1e-9)

    def test_finite_differences_2x4x3x3(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 4, 3, 3))
        layer = bn(4)
        g = rng.normal(size=x.shape)
        from oracles import central_difference, rel_error

        def f():
            return float(np.sum(tinynet.batchnorm_forward(x, layer, True, update_stats=False) * g))

        assert rel_error(tinynet.batchnorm_backward(x, layer, g)[0], central_difference(f, x)) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert check_batchnorm(np.random.default_rng(100 + seed)) < 1e-3


class TestSoftmaxAndLoss:
    def test_equal_logits(self):
        p = tinynet.softmax_channels(np.zeros((1, 2, 3, 3)))
        np.testing.assert_allclose(p, 0.5)

    def test_no_overflow(self):
        p = tinynet.softmax_channels(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))
        assert np.isfinite(p).all()
        assert p[0, 0, 0, 0] == pytest.approx(1.0) and p[0, 1, 0, 0] == pytest.approx(0.0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_softmax_sums_to_one(self, seed):
        x = np.random.default_rng(seed).normal(scale=10, size=(1, 32, 4, 4))
        np.testing.assert_allclose(tinynet.softmax_channels(x).sum(axis=1), 1.0, atol=1e-6)

    def test_confident_logits_zero_loss(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 100.0
        loss, _ = tinynet.cross_entropy_loss(logits, np.ones((2, 2), dtype=int))
        assert loss == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("c", [2, 5, 32])
    def test_uniform_logits_give_log_c(self, c):
        loss, _ = tinynet.cross_entropy_loss(np.zeros((1, c, 3, 3)), np.zeros((3, 3), dtype=int))
        assert loss == pytest.approx(math.log(c))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="target labels"):
            tinynet.cross_entropy_loss(np.zeros((1, 3, 2, 2)), np.full((2, 2), 3))

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert check_cross_entropy(np.random.default_rng(200 + seed)) < 1e-3


class TestSGD:
    def test_no_momentum(self):
        (p,), _ = tinynet.sgd_step([np.array([1.0, 2.0])], [np.array([0.5, -1.0])], lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p, [0.95, 2.1])

    def test_zero_gradient_is_a_no_op(self):
        (p,), _ = tinynet.sgd_step([np.array([3.0])], [np.array([0.0])], lr=0.5, momentum=0.9,
                                   velocity=[np.array([0.0])])
        assert p[0] == 3.0

    def test_two_momentum_steps(self):
        g = np.array([1.0, -2.0])
        p0 = np.array([0.0, 0.0])
        p1, v = tinynet.sgd_step([p0], [g], lr=1.0, momentum=0.9)
        p2, _ = tinynet.sgd_step(p1, [g], lr=1.0, momentum=0.9, velocity=v)
        np.testing.assert_allclose(p0 - p2[0], 2.9 * g)

    def test_class_matches_functional_form(self):
        g = np.array([0.3, -0.1], dtype=np.float32)
        p = np.array([1.0, 1.0], dtype=np.float32)
        opt = tinynet.SGD(lr=0.5, momentum=0.9)
        opt.step([p], [g])
        opt.step([p], [g])
        expect, v = tinynet.sgd_step([np.ones(2)], [g], 0.5, 0.9)
        expect, _ = tinynet.sgd_step(expect, [g], 0.5, 0.9, v)
        np.testing.assert_allclose(p, expect[0], rtol=1e-6)


class TestSequential:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        return tinynet.Sequential([
            tinynet.ConvLayer.init(3, 4, 3, rng), tinynet.BatchNormLayer.init(4), tinynet.ReLU(),
            tinynet.ConvLayer.init(4, 5, 1, rng), tinynet.BatchNormLayer.init(5),
        ])

    def test_backward_matches_finite_differences(self):
        from oracles import central_difference, rel_error

        net = self.make()
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 3, 4, 4))
        target = rng.integers(0, 5, size=(4, 4))

        def f():
            return tinynet.cross_entropy_loss(net.forward(x, update_stats=False), target)[0]

        _, grad = tinynet.cross_entropy_loss(net.forward(x, update_stats=False), target)
        grads = net.backward(grad)
        # small step: the ReLU kinks are within 1e-3 of some pre-activations
        first_conv = net.layers[0]
        assert rel_error(grads[0], central_difference(f, first_conv.weight, h=1e-5)) < 1e-3

    def test_weights_round_trip(self, tmp_path):
        net = self.make(3)
        net.forward(np.random.default_rng(0).normal(size=(1, 3, 5, 5)))  # move the running stats
        tinynet.save_weights(net, tmp_path / "w.bin")
        loaded = tinynet.load_weights(tmp_path / "w.bin")
        assert [type(layer) for layer in loaded.layers] == [type(layer) for layer in net.layers]
        for a, b in zip(net.params(), loaded.params()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(loaded.layers[1].running_var, net.layers[1].running_var)
        x = np.random.default_rng(1).normal(size=(1, 3, 5, 5))
        np.testing.assert_array_equal(net.forward(x, training=False), loaded.forward(x, training=False))

    def test_weights_header(self, tmp_path):
        tinynet.save_weights(self.make(), tmp_path / "w.bin")
        assert (tmp_path / "w.bin").read_bytes()[:4] == b"ACNT"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\0" * 32)
        with pytest.raises(ValueError, match="not a weights file"):
            tinynet.load_weights(tmp_path / "bad.bin")

import numpy as np
import pytest

from lpyolo.kernels import (
    ACC_LIMIT,
    ConvWeights,
    RequantSpec,
    conv2d_acc,
    conv2d_real,
    maxpool,
    maxpool_grid,
    requantize,
    rescaled_hardtanh,
    sigmoid,
    sigmoid_via_tanh,
)
from lpyolo.qcore import QuantParams, QuantTensor

from oracles import random_layer, seven_loop_conv


def _u8(scale=1.0):
    return QuantParams(bits=8, signed=False, scale=scale)


def _wp(bits=8, scale=1.0):
    return QuantParams(bits=bits, signed=True, scale=scale)


class TestActivations:
    def test_sigmoid_values(self):
        assert sigmoid(np.array(0.0)) == 0.5
        assert sigmoid(np.array(50.0)) == pytest.approx(1.0)
        assert sigmoid(np.array(-50.0)) == pytest.approx(0.0, abs=1e-20)

    def test_sigmoid_complement(self):
        x = np.linspace(-20, 20, 401)
        assert np.allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)

    def test_tanh_form_agrees(self):
        x = np.linspace(-10, 10, 2001)
        assert np.max(np.abs(sigmoid(x) - sigmoid_via_tanh(x))) < 1e-12

    def test_hardtanh_values(self):
        x = np.array([-5.0, -2.0, 0.0, 2.0, 5.0])
        assert np.array_equal(rescaled_hardtanh(x), [0.0, 0.0, 0.5, 1.0, 1.0])
        assert rescaled_hardtanh(np.array(1.0)) == 0.75

    def test_hardtanh_tracks_sigmoid(self):
        x = np.linspace(-10, 10, 5001)
        gap = np.abs(rescaled_hardtanh(x) - sigmoid(x))
        assert gap.max() < 0.12
        # the worst case sits exactly at the saturation knees
        assert gap.max() == pytest.approx(1.0 - sigmoid(np.array(2.0)), abs=1e-9)


class TestConvWeights:
    def test_validates_range(self):
        w = np.full((1, 1, 3, 3), 10, dtype=np.int32)
        with pytest.raises(ValueError):
            ConvWeights(weights=w, w_params=_wp(bits=4))

    def test_rejects_even_kernel(self):
        w = np.zeros((1, 1, 2, 2), dtype=np.int32)
        with pytest.raises(ValueError):
            ConvWeights(weights=w, w_params=_wp())

    def test_rejects_bias_length_mismatch(self):
        w = np.zeros((2, 1, 1, 1), dtype=np.int32)
        with pytest.raises(ValueError):
            ConvWeights(weights=w, w_params=_wp(), bias=np.zeros(3, dtype=np.int32))

    def test_properties(self):
        w = np.zeros((5, 3, 3, 3), dtype=np.int32)
        cw = ConvWeights(weights=w, w_params=_wp())
        assert (cw.out_channels, cw.in_channels, cw.kernel) == (5, 3, 3)


class TestConv:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = QuantTensor.from_grid(
            rng.integers(0, 256, size=(7, 5, 3)).astype(np.int32), _u8()
        )
        w = np.zeros((3, 3, 1, 1), dtype=np.int32)
        for c in range(3):
            w[c, c, 0, 0] = 1
        acc = conv2d_acc(x, ConvWeights(weights=w, w_params=_wp()))
        assert np.array_equal(acc, x.grid())

    def test_zero_input_bias_broadcast(self):
        x = QuantTensor.from_grid(np.zeros((4, 4, 2), dtype=np.int32), _u8())
        w = np.ones((3, 2, 3, 3), dtype=np.int32)
        bias = np.array([5, -7, 11], dtype=np.int32)
        acc = conv2d_acc(x, ConvWeights(weights=w, w_params=_wp(), bias=bias))
        assert np.array_equal(acc, np.broadcast_to(bias, (4, 4, 3)))

    def test_channel_mismatch(self):
        x = QuantTensor.from_grid(np.zeros((4, 4, 2), dtype=np.int32), _u8())
        w = np.zeros((1, 3, 3, 3), dtype=np.int32)
        with pytest.raises(ValueError):
            conv2d_acc(x, ConvWeights(weights=w, w_params=_wp()))

    def test_matches_seven_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 5))
            h, wd = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            k = int(rng.choice([1, 3]))
            x = QuantTensor.from_grid(
                rng.integers(0, 256, size=(h, wd, cin)).astype(np.int32), _u8()
            )
            w = rng.integers(-128, 128, size=(cout, cin, k, k)).astype(np.int32)
            bias = rng.integers(-500, 500, size=cout).astype(np.int32)
            cw = ConvWeights(weights=w, w_params=_wp(), bias=bias)
            assert np.array_equal(
                conv2d_acc(x, cw), seven_loop_conv(x.grid(), w, bias)
            )

    def test_real_conv_matches_integer_exactly(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x, cw, _ = random_layer(rng, wbits=8, abits=8)
            acc_i = conv2d_acc(x, cw)
            acc_f = conv2d_real(x.grid().astype(np.float64), cw.weights, cw.bias)
            assert np.array_equal(acc_i, acc_f.astype(np.int64))
            assert np.array_equal(acc_i.astype(np.float64), acc_f)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        w = rng.integers(-8, 8, size=(4, 3, 3, 3)).astype(np.int32)
        cw = ConvWeights(weights=w, w_params=_wp(bits=5))
        a = rng.integers(0, 100, size=(6, 6, 3)).astype(np.int32)
        b = rng.integers(0, 100, size=(6, 6, 3)).astype(np.int32)
        p = _u8()
        acc_sum = conv2d_acc(QuantTensor.from_grid(a + b, p), cw)
        acc_a = conv2d_acc(QuantTensor.from_grid(a, p), cw)
        acc_b = conv2d_acc(QuantTensor.from_grid(b, p), cw)
        assert np.array_equal(acc_sum, acc_a + acc_b)

    def test_overflow_guard(self):
        # a bias pushing the largest window sum to exactly 2^31 must trip it
        x = QuantTensor.from_grid(np.full((8, 8, 3), 255, dtype=np.int32), _u8())
        w = np.full((1, 3, 3, 3), 127, dtype=np.int32)
        bias = np.array([ACC_LIMIT - 255 * 127 * 27], dtype=np.int32)
        with pytest.raises(ValueError, match="overflow"):
            conv2d_acc(x, ConvWeights(weights=w, w_params=_wp(), bias=bias))


class TestRequantize:
    def test_relu_examples(self):
        spec = RequantSpec(
            in_scale=0.5, w_scale=0.25, out_scale=0.125, out_bits=4, activation="relu"
        )
        acc = np.array([[[0, 1, -3, 100]]], dtype=np.int64)
        out = requantize(acc, spec)
        # M = 0.5*0.25/0.125 = 1.0
        assert out.data.tolist() == [0, 1, 0, 15]
        assert out.params == QuantParams(bits=4, signed=False, scale=0.125)

    def test_hardtanh_zero_maps_to_midpoint(self):
        spec = RequantSpec(
            in_scale=1.0,
            w_scale=1.0,
            out_scale=1.0 / 255.0,
            out_bits=8,
            activation="rescaled_hardtanh",
        )
        out = requantize(np.zeros((2, 2, 3), dtype=np.int64), spec)
        assert np.all(out.data == 128)  # 127.5 rounds half-even to 128

    def test_hardtanh_saturates(self):
        spec = RequantSpec(
            in_scale=1.0,
            w_scale=1.0,
            out_scale=1.0 / 255.0,
            out_bits=8,
            activation="rescaled_hardtanh",
        )
        out = requantize(np.array([[[-1000, 1000]]], dtype=np.int64), spec)
        assert out.data.tolist() == [0, 255]

    def test_hardtanh_requires_pinned_scale(self):
        with pytest.raises(ValueError):
            RequantSpec(
                in_scale=1.0,
                w_scale=1.0,
                out_scale=0.01,
                out_bits=8,
                activation="rescaled_hardtanh",
            )

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            RequantSpec(
                in_scale=1.0, w_scale=1.0, out_scale=1.0, out_bits=8, activation="gelu"
            )

    def test_relu_clamp_equals_pre_activation(self):
        # clamping after the round is the same as relu before it
        rng = np.random.default_rng(9)
        spec = RequantSpec(
            in_scale=0.03, w_scale=0.07, out_scale=0.11, out_bits=6, activation="relu"
        )
        acc = rng.integers(-(10**6), 10**6, size=(5, 5, 4))
        out = requantize(acc, spec)
        pre = np.maximum(acc, 0).astype(np.float64) * spec.multiplier()
        ref = np.clip(np.rint(pre), 0, 63).astype(np.int32)
        assert np.array_equal(out.grid(), ref)

    def test_int_and_float_accumulators_agree(self):
        rng = np.random.default_rng(13)
        spec = RequantSpec(
            in_scale=0.5, w_scale=0.02, out_scale=0.4, out_bits=3, activation="relu"
        )
        acc = rng.integers(-(10**9), 10**9, size=(3, 3, 2))
        a = requantize(acc, spec)
        b = requantize(acc.astype(np.float64), spec)
        assert np.array_equal(a.data, b.data)


class TestMaxPool:
    def test_stride2_example(self):
        g = np.array([[1, 2], [3, 4]], dtype=np.int32).reshape(2, 2, 1)
        out = maxpool_grid(g, stride=2)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 4

    def test_stride2_blocks(self):
        g = np.arange(32, dtype=np.int32).reshape(4, 4, 2)
        out = maxpool_grid(g, stride=2)
        assert out.shape == (2, 2, 2)
        # each output is the max of its own 2x2 block, channel-wise
        for by in range(2):
            for bx in range(2):
                blk = g[2 * by : 2 * by + 2, 2 * bx : 2 * bx + 2]
                assert np.array_equal(out[by, bx], blk.max(axis=(0, 1)))

    def test_stride2_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            maxpool_grid(np.zeros((3, 4, 1), dtype=np.int32), stride=2)

    def test_stride1_shape_preserved(self):
        g = np.arange(9, dtype=np.int32).reshape(3, 3, 1)
        out = maxpool_grid(g, stride=1, pad_value=0)
        assert out.shape == (3, 3, 1)
        assert np.array_equal(
            out[:, :, 0], np.array([[4, 5, 5], [7, 8, 8], [7, 8, 8]])
        )

    def test_stride1_padding_never_wins(self):
        g = np.full((4, 4, 1), -5, dtype=np.int32)
        out = maxpool_grid(g, stride=1, pad_value=-8)
        assert np.all(out == -5)

    def test_stride1_matches_naive(self):
        rng = np.random.default_rng(17)
        g = rng.integers(0, 16, size=(6, 7, 3)).astype(np.int32)
        out = maxpool_grid(g, stride=1, pad_value=0)
        h, w, c = g.shape
        for y in range(h):
            for x in range(w):
                vals = g[y : min(y + 2, h), x : min(x + 2, w)]
                assert np.array_equal(out[y, x], vals.max(axis=(0, 1)))

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            maxpool_grid(np.zeros((2, 2, 1), dtype=np.int32), stride=3)

    def test_tensor_wrapper_keeps_params(self):
        p = QuantParams(bits=4, signed=False, scale=0.25)
        t = QuantTensor.from_grid(
            np.arange(16, dtype=np.int32).reshape(4, 4, 1) % 16, p
        )
        out = maxpool(t, stride=2)
        assert out.params == p
        assert out.shape == (2, 2, 1)

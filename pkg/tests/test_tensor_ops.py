import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colearnseg import ops
from colearnseg.errors import ConfigError, DegenerateVarianceError, DimensionError
from colearnseg.tensor import Tensor, Parameter

from oracles import (
    batch_norm_loops,
    conv2d_loops,
    conv3d_modality_loops,
    max_pool2d_loops,
    softmax_loops,
    upsample_nearest_loops,
)


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


def param(arr, name="p", kind="kernel"):
    return Parameter(np.asarray(arr, dtype=np.float32), name, kind=kind)


class TestConv2d:
    def test_zero_input_gives_zero_output(self):
        x = t(np.zeros((1, 3, 3, 1)))
        w = param(np.random.default_rng(0).normal(size=(3, 3, 1, 1)))
        b = param(np.zeros(1), kind="bias")
        out = ops.conv2d(x, w, b)
        assert out.shape == (1, 3, 3, 1)
        assert np.all(out.data == 0)

    def test_one_by_one_conv_is_affine(self):
        x = t([[[[2.0]]]])
        w = param([[[[3.0]]]])
        b = param([1.0], kind="bias")
        out = ops.conv2d(x, w, b)
        assert out.data.reshape(()) == pytest.approx(7.0)

    def test_matches_loop_oracle_same_padding(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 5, 5, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = ops.conv2d(t(x), param(w), param(b, kind="bias"))
        ref = conv2d_loops(x, w, b)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same")])
    def test_matches_loop_oracle_configs(self, stride, padding):
        rng = np.random.default_rng(stride * 31 + len(padding))
        for trial in range(10):
            h = 5 if stride == 2 and padding == "same" else 6
            x = rng.normal(size=(2, h, h, 3)).astype(np.float32)
            w = rng.normal(size=(3, 3, 3, 2)).astype(np.float32)
            b = rng.normal(size=2).astype(np.float32)
            out = ops.conv2d(t(x), param(w), param(b, kind="bias"), stride=stride,
                             padding=padding)
            ref = conv2d_loops(x, w, b, stride=stride, padding=padding)
            np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_same_padding_preserves_extents(self):
        x = t(np.random.default_rng(1).normal(size=(2, 8, 6, 3)))
        w = param(np.zeros((5, 5, 3, 7)))
        out = ops.conv2d(x, w, param(np.zeros(7), kind="bias"))
        assert out.shape == (2, 8, 6, 7)

    def test_channel_mismatch_raises(self):
        x = t(np.zeros((1, 4, 4, 3)))
        w = param(np.zeros((3, 3, 2, 1)))
        with pytest.raises(DimensionError):
            ops.conv2d(x, w, param(np.zeros(1), kind="bias"))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ops.conv2d(t(np.zeros((1, 4, 4, 1))), param(np.zeros((2, 2, 1, 1))),
                       param(np.zeros(1), kind="bias"))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 6, 4)).astype(np.float32)
        w = rng.normal(size=(3, 3, 4, 4)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        r1 = ops.conv2d(t(x), param(w), param(b, kind="bias")).data
        r2 = ops.conv2d(t(x), param(w), param(b, kind="bias")).data
        assert np.array_equal(r1, r2)


class TestConv3dModality:
    def test_ones_sum_over_modalities(self):
        x = t(np.ones((1, 2, 2, 2, 1)))
        w = param(np.ones((1, 1, 2, 1, 1)))
        out = ops.conv3d_modality(x, w, param(np.zeros(1), kind="bias"))
        assert out.shape == (1, 2, 2, 1)
        np.testing.assert_allclose(out.data, 2.0)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(5)
        x = t(np.zeros((1, 4, 4, 2, 3)))
        w = param(rng.normal(size=(3, 3, 2, 3, 6)))
        out = ops.conv3d_modality(x, w, param(np.zeros(6), kind="bias"))
        assert np.all(out.data == 0)

    def test_matches_triple_sum_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4, 4, 2, 3)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 3, 6)).astype(np.float32)
        b = rng.normal(size=6).astype(np.float32)
        out = ops.conv3d_modality(t(x), param(w), param(b, kind="bias"))
        ref = conv3d_modality_loops(x, w, b)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_modality_extent_must_be_two(self):
        x = t(np.zeros((1, 4, 4, 3, 2)))
        w = param(np.zeros((3, 3, 3, 2, 4)))
        with pytest.raises(DimensionError):
            ops.conv3d_modality(x, w, param(np.zeros(4), kind="bias"))


class TestLeakyRelu:
    def test_positive_branch(self):
        assert ops.leaky_relu(t([2.0]), 0.1).data[0] == pytest.approx(2.0)

    def test_negative_branch(self):
        assert ops.leaky_relu(t([-1.0]), 0.1).data[0] == pytest.approx(-0.1)

    def test_zero(self):
        assert ops.leaky_relu(t([0.0]), 0.1).data[0] == 0.0

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 2.0])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ConfigError):
            ops.leaky_relu(t([1.0]), alpha)


class TestBatchNorm:
    def test_training_standardizes(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(loc=3.0, scale=2.0, size=(4, 5, 5, 3)))
        state = ops.BatchNormState(3, "bn")
        out = ops.batch_norm(x, state).data
        mu = out.mean(axis=(0, 1, 2))
        var = out.var(axis=(0, 1, 2))
        assert np.all(np.abs(mu) < 1e-5)
        assert np.all(np.abs(var - 1.0) < 1e-4)

    def test_constant_channel_maps_to_beta(self):
        x = t(np.full((2, 3, 3, 1), 7.0))
        state = ops.BatchNormState(1, "bn")
        state.beta.data[...] = 0.5
        out = ops.batch_norm(x, state).data
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 3, 3, 2)).astype(np.float32)
        state = ops.BatchNormState(2, "bn")
        state.gamma.data[...] = rng.normal(size=2)
        state.beta.data[...] = rng.normal(size=2)
        out = ops.batch_norm(t(x), state).data
        ref = batch_norm_loops(x, state.gamma.data, state.beta.data, state.epsilon)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_inference_uses_running_stats_only(self):
        state = ops.BatchNormState(2, "bn")
        state.running_mean[...] = [1.0, -1.0]
        state.running_var[...] = [4.0, 0.25]
        state.mode = "infer"
        rng = np.random.default_rng(9)
        x1 = rng.normal(size=(2, 4, 4, 2)).astype(np.float32)
        single = ops.batch_norm(t(x1[:1]), state).data
        batched = ops.batch_norm(t(x1), state).data
        np.testing.assert_array_equal(single, batched[:1])

    def test_running_stats_updated_in_training(self):
        state = ops.BatchNormState(1, "bn")
        x = t(np.random.default_rng(0).normal(loc=5.0, size=(2, 4, 4, 1)))
        ops.batch_norm(x, state)
        assert state.running_mean[0] > 0.0
        assert np.all(state.running_var >= 0.0)

    def test_single_element_training_raises(self):
        state = ops.BatchNormState(1, "bn")
        with pytest.raises(DegenerateVarianceError):
            ops.batch_norm(t(np.zeros((1, 1, 1, 1))), state)


class TestMaxPool:
    def test_window_maximum(self):
        x = t(np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]]))
        out = ops.max_pool2d(x)
        assert out.data.reshape(()) == 4.0

    def test_constant_input(self):
        x = t(np.full((1, 4, 4, 2), 3.5))
        out = ops.max_pool2d(x)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, 3.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 6, 6, 3)).astype(np.float32)
        out = ops.max_pool2d(t(x))
        np.testing.assert_array_equal(out.data, max_pool2d_loops(x))

    def test_odd_extent_rejected(self):
        with pytest.raises(DimensionError):
            ops.max_pool2d(t(np.zeros((1, 5, 4, 1))))


class TestUpsampleNearest:
    def test_replication(self):
        out = ops.upsample_nearest(t([[[[5.0]]]]))
        assert out.shape == (1, 2, 2, 1)
        np.testing.assert_array_equal(out.data, 5.0)

    def test_upsample_of_pooled_constant_is_identity(self):
        x = np.full((1, 4, 4, 2), 2.25, dtype=np.float32)
        out = ops.upsample_nearest(ops.max_pool2d(t(x)))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_index_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 3, 3, 2)).astype(np.float32)
        out = ops.upsample_nearest(t(x))
        np.testing.assert_array_equal(out.data, upsample_nearest_loops(x))


class TestStackAndConcat:
    def test_stack_shape_and_order(self):
        a = t(np.full((1, 2, 2, 1), 1.0))
        b = t(np.full((1, 2, 2, 1), 2.0))
        out = ops.stack_modality(a, b)
        assert out.shape == (1, 2, 2, 2, 1)
        np.testing.assert_array_equal(out.data[:, :, :, 0, :], a.data)
        np.testing.assert_array_equal(out.data[:, :, :, 1, :], b.data)

    def test_concat_first_block_bit_equal(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(1, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=(1, 3, 3, 5)).astype(np.float32)
        out = ops.concat_channels(t(a), t(b))
        assert out.shape == (1, 3, 3, 8)
        assert np.array_equal(out.data[..., :3], a)
        assert np.array_equal(out.data[..., 3:], b)

    def test_concat_round_trip(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(2, 4, 4, 2)).astype(np.float32)
        b = rng.normal(size=(2, 4, 4, 6)).astype(np.float32)
        out = ops.concat_channels(t(a), t(b)).data
        assert np.array_equal(out[..., :2], a) and np.array_equal(out[..., 2:], b)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ops.stack_modality(t(np.zeros((1, 2, 2, 1))), t(np.zeros((1, 3, 2, 1))))
        with pytest.raises(DimensionError):
            ops.concat_channels(t(np.zeros((1, 2, 2, 1))), t(np.zeros((1, 3, 2, 1))))


class TestElementwiseMul:
    def test_identity_and_zero(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
        assert np.array_equal(ops.elementwise_mul(t(a), t(np.ones_like(a))).data, a)
        assert np.all(ops.elementwise_mul(t(a), t(np.zeros_like(a))).data == 0)

    def test_direct_arithmetic(self):
        out = ops.elementwise_mul(t([2.0, 3.0]), t([4.0, -1.0]))
        np.testing.assert_array_equal(out.data, [8.0, -3.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.elementwise_mul(t(np.zeros((2, 2))), t(np.zeros((2, 3))))


class TestSoftmaxPixelwise:
    def test_equal_logits_uniform(self):
        out = ops.softmax_pixelwise(t(np.zeros((1, 2, 2, 4))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_large_logits_no_overflow(self):
        out = ops.softmax_pixelwise(t([[[[1000.0, 0.0]]]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.reshape(-1), [1.0, 0.0], atol=1e-6)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(14)
        o = rng.normal(size=(1, 2, 2, 4)).astype(np.float32)
        out = ops.softmax_pixelwise(t(o)).data
        np.testing.assert_allclose(out, softmax_loops(o), atol=1e-6)

    def test_sums_to_one(self):
        rng = np.random.default_rng(15)
        o = rng.normal(scale=5.0, size=(2, 4, 4, 5)).astype(np.float32)
        s = ops.softmax_pixelwise(t(o)).data.sum(axis=-1)
        assert np.all(np.abs(s - 1.0) <= 1e-6)

    @given(st.lists(st.floats(-20, 20), min_size=3, max_size=3),
           st.floats(-50, 50))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, logits, shift):
        o = np.array(logits, dtype=np.float32).reshape(1, 1, 1, 3)
        p1 = ops.softmax_pixelwise(t(o)).data
        p2 = ops.softmax_pixelwise(t(o + np.float32(shift))).data
        np.testing.assert_allclose(p1, p2, atol=1e-6)

"""Tensor-core contracts: op semantics, autodiff vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonospeck import gradcheck as gc
from sonospeck import tensor as T
from sonospeck.errors import NumericalError, ValidationError
from sonospeck.tensor import Tensor


def t4(arr, **kw):
    arr = np.asarray(arr, dtype=np.float64)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr, dtype=np.float64, **kw)


class TestConstruction:
    def test_rank4_enforced(self):
        with pytest.raises(ValidationError):
            Tensor(np.zeros((3, 3)))

    def test_data_length_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4, 5)))
        assert t.data.size == 2 * 3 * 4 * 5

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            Tensor(np.full((1, 1, 1, 1), np.nan))

    def test_exp_overflow_is_an_error(self):
        x = Tensor(np.full((1, 1, 1, 1), 1e9, dtype=np.float32))
        with pytest.raises(NumericalError):
            T.exp_map(x)


class TestConv2d:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(k, dtype=np.float64),
                       Tensor(np.zeros((1, 1, 1, 1))), "reflect")
        np.testing.assert_allclose(out.data, x.data.astype(out.dtype), atol=1e-7)

    def test_all_ones_on_constant_is_9v(self):
        v = 0.37
        x = Tensor(np.full((1, 1, 6, 7), v))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))),
                       Tensor(np.zeros((1, 1, 1, 1))), "reflect")
        np.testing.assert_allclose(out.data, 9 * v, rtol=1e-6)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        x = t4(rng.standard_normal((1, 1, 5, 5)), requires_grad=True)
        k = t4(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
        b = t4(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
        d = rng.standard_normal((1, 2, 5, 5))
        res = gc.check_op(
            "conv2d",
            lambda ls: T.reduce_mean(T.mul(T.conv2d(ls[0], ls[1], ls[2]), Tensor(d))),
            [x, k, b],
        )
        assert res.passed, res.line()

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 8, 8)))
        with pytest.raises(ValidationError):
            T.conv2d(x, Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 1, 1))))

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        with pytest.raises(ValidationError):
            T.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 1, 1))))

    def test_linearity_in_input(self):
        rng = np.random.default_rng(2)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)))
        zero_b = Tensor(np.zeros((1, 3, 1, 1)))
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        y = Tensor(rng.standard_normal((1, 2, 6, 6)))
        a, b = 1.7, -0.6
        lhs = T.conv2d(Tensor(a * x.data + b * y.data), k, zero_b)
        rhs = a * T.conv2d(x, k, zero_b).data + b * T.conv2d(y, k, zero_b).data
        np.testing.assert_allclose(lhs.data, rhs, atol=1e-5)


class TestDepthwise:
    def test_per_channel_delta_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(0, 1, (1, 2, 9, 9)))
        k = np.zeros((2, 1, 7, 7))
        k[:, 0, 3, 3] = 1.0
        out = T.depthwise_conv7(x, Tensor(k), Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_zero_channel_gives_bias(self):
        rng = np.random.default_rng(4)
        x = np.zeros((1, 2, 8, 8), dtype=np.float32)
        x[0, 1] = rng.uniform(0, 1, (8, 8))
        bias = Tensor(np.array([0.3, -0.2]).reshape(1, 2, 1, 1))
        out = T.depthwise_conv7(Tensor(x), Tensor(rng.standard_normal((2, 1, 7, 7))), bias)
        np.testing.assert_allclose(out.data[0, 0], 0.3, atol=1e-6)

    def test_channel_separation(self):
        # output channel 0 must not react to perturbations of channel 1
        rng = np.random.default_rng(5)
        k = Tensor(rng.standard_normal((2, 1, 7, 7)))
        b = Tensor(np.zeros((1, 2, 1, 1)))
        x1 = rng.standard_normal((1, 2, 10, 10))
        x2 = x1.copy()
        x2[0, 1] += rng.standard_normal((10, 10))
        o1 = T.depthwise_conv7(Tensor(x1), k, b)
        o2 = T.depthwise_conv7(Tensor(x2), k, b)
        np.testing.assert_array_equal(o1.data[0, 0], o2.data[0, 0])
        assert np.abs(o1.data[0, 1] - o2.data[0, 1]).max() > 1e-3

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        x = t4(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
        k = t4(0.3 * rng.standard_normal((2, 1, 7, 7)), requires_grad=True)
        b = t4(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
        d = rng.standard_normal((1, 2, 8, 8))
        res = gc.check_op(
            "depthwise",
            lambda ls: T.reduce_mean(T.mul(T.depthwise_conv7(ls[0], ls[1], ls[2]), Tensor(d))),
            [x, k, b],
        )
        assert res.passed, res.line()


class TestPointwise:
    def test_identity_matrix(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = T.pointwise_conv(x, w, Tensor(np.zeros((1, 3, 1, 1))))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_sum_of_channels(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 5, 5))
        out = T.pointwise_conv(Tensor(x), Tensor(np.ones((1, 2, 1, 1))),
                               Tensor(np.zeros((1, 1, 1, 1))))
        np.testing.assert_allclose(out.data[0, 0], x[0, 0] + x[0, 1], atol=1e-6)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(9)
        x = t4(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
        w = t4(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
        b = t4(rng.standard_normal((1, 2, 1, 1)), requires_grad=True)
        d = rng.standard_normal((1, 2, 4, 4))
        res = gc.check_op(
            "pointwise",
            lambda ls: T.reduce_mean(T.mul(T.pointwise_conv(ls[0], ls[1], ls[2]), Tensor(d))),
            [x, w, b],
        )
        assert res.passed, res.line()


class TestLayerNorm:
    def test_normalized_input_passes_through(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((1, 8, 3, 3))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        one = Tensor(np.ones((1, 8, 1, 1)))
        zero = Tensor(np.zeros((1, 8, 1, 1)))
        out = T.layer_norm_channels(Tensor(x), one, zero, 1e-10)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_constant_channel_vector_gives_shift(self):
        x = Tensor(np.full((1, 4, 2, 2), 3.3))
        scale = Tensor(np.full((1, 4, 1, 1), 2.0))
        shift = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
        out = T.layer_norm_channels(x, scale, shift, 1e-6)
        np.testing.assert_allclose(out.data, shift.data * np.ones((1, 4, 2, 2)), atol=1e-6)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        x = t4(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
        sc = t4(1 + 0.1 * rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
        sh = t4(0.1 * rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
        d = rng.standard_normal((1, 4, 2, 2))
        res = gc.check_op(
            "layer_norm",
            lambda ls: T.reduce_mean(T.mul(T.layer_norm_channels(*ls, eps=1e-6), Tensor(d))),
            [x, sc, sh],
        )
        assert res.passed, res.line()


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.0

    def test_asymptote_at_10(self):
        assert abs(T.gelu(t4([[[[10.0]]]])).item() - 10.0) < 1e-6

    def test_gradient_at_half(self):
        x = t4([[[[0.5]]]], requires_grad=True)
        out = T.gelu(x)
        T.backward(out)
        h = 1e-6
        fd = (T.gelu(t4([[[[0.5 + h]]]])).item() - T.gelu(t4([[[[0.5 - h]]]])).item()) / (2 * h)
        assert abs(float(x.grad.reshape(())) - fd) < 1e-6


class TestElementwise:
    def test_exp_log_inverse(self):
        rng = np.random.default_rng(12)
        y = Tensor(rng.uniform(0.05, 1.0, (1, 1, 6, 6)))
        back = T.exp_map(T.log_map(y, 0.0))
        np.testing.assert_allclose(back.data, y.data, atol=1e-6)

    def test_log_map_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            T.log_map(Tensor(np.zeros((1, 1, 2, 2))), 0.0)

    def test_forward_diff_constant_is_zero(self):
        x = Tensor(np.full((1, 1, 4, 5), 2.5))
        assert np.all(T.forward_diff(x, "horizontal").data == 0)
        assert np.all(T.forward_diff(x, "vertical").data == 0)

    def test_forward_diff_hand_value(self):
        x = t4([[[[1.0, 3.0, 6.0]]]])
        np.testing.assert_allclose(T.forward_diff(x, "horizontal").data[0, 0, 0], [2.0, 3.0])

    def test_forward_diff_shrinks_axis(self):
        x = Tensor(np.zeros((2, 1, 5, 7)))
        assert T.forward_diff(x, "horizontal").shape == (2, 1, 5, 6)
        assert T.forward_diff(x, "vertical").shape == (2, 1, 4, 7)

    def test_abs_subgradient_zero_at_zero(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        T.backward(T.reduce_mean(T.abs_map(x)))
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.grad))

    def test_scale_by_channel_vector(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 3, 2, 2))
        v = np.array([1.0, -2.0, 0.5])
        out = T.scale_by_channel_vector(Tensor(x), Tensor(v.reshape(1, 3, 1, 1)))
        np.testing.assert_allclose(out.data, x * v.reshape(1, 3, 1, 1), atol=1e-6)


class TestReductions:
    def test_var_of_constant_is_zero(self):
        assert T.reduce_var(Tensor(np.full((1, 1, 3, 3), 4.2))).item() == 0.0

    def test_hand_values(self):
        x = t4(np.array([0.1, -0.1, 0.2, -0.2]).reshape(1, 1, 1, 4))
        assert T.reduce_mean(x).item() == pytest.approx(0.0, abs=1e-12)
        assert T.reduce_var(x).item() == pytest.approx(0.025, abs=1e-12)

    def test_population_convention(self):
        data = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
        # population variance divides by N, not N-1
        assert T.reduce_var(t4(data)).item() == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_variance_gradient_vs_fd(self):
        rng = np.random.default_rng(14)
        x = t4(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        res = gc.check_op("reduce_var", lambda ls: T.reduce_var(ls[0]), [x])
        assert res.passed, res.line()

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            T.reduce_mean(Tensor(np.zeros((0, 1, 1, 1))))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=30))
    @settings(max_examples=30, deadline=None)
    def test_var_identity(self, values):
        x = np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)
        t = t4(x)
        lhs = T.reduce_var(t).item()
        rhs = T.reduce_mean(t4(x * x)).item() - T.reduce_mean(t).item() ** 2
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(rhs))


class TestBackward:
    def test_mean_gradient_is_uniform(self):
        x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4), requires_grad=True)
        T.backward(T.reduce_mean(x))
        np.testing.assert_allclose(x.grad, np.full((1, 1, 3, 4), 1.0 / 12.0), rtol=1e-6)

    def test_quadratic_gradient(self):
        rng = np.random.default_rng(15)
        x = t4(rng.standard_normal((1, 1, 2, 3)), requires_grad=True)
        T.backward(T.reduce_mean(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data / x.data.size, rtol=1e-10)

    def test_fanout_accumulates(self):
        x = t4([[[[3.0]]]], requires_grad=True)
        y = T.add(x, x)  # dy/dx = 2
        T.backward(T.reduce_mean(y))
        assert float(x.grad.reshape(())) == pytest.approx(2.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ValidationError):
            T.backward(T.abs_map(x))

    def test_double_backward_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        loss = T.reduce_mean(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(ValidationError):
            T.backward(loss)

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.no_grad():
            out = T.reduce_mean(T.mul(x, x))
        assert not out.requires_grad
        assert out._bwd is None


class TestOpSuite:
    def test_twenty_random_instances_all_ops(self):
        # >= 20 random small instances per op, 64-bit, step 1e-5, tol 1e-4
        results = gc.op_suite(seed=0, instances=20)
        failures = [r.line() for r in results if not r.passed]
        assert not failures, "\n".join(failures)

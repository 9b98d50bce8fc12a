import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rootsr.errors import ContractError, ParameterError, ShapeError
from rootsr.tensor import (
    AdamConfig,
    Parameter,
    Tensor,
    adam_step,
    bce_with_logits,
    conv2d,
    deconv2d,
    finite_diff_check,
    linear,
    mse_loss,
    prelu,
)

from oracles import conv2d_loops, deconv2d_loops, matmul_loops


def rand(rng, *shape, dtype=np.float32):
    return rng.uniform(-1, 1, size=shape).astype(dtype)


class TestConv2d:
    def test_all_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                     Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 9), w=st.integers(1, 9))
    @settings(max_examples=40, deadline=None)
    def test_delta_kernel_is_identity(self, n, c, h, w):
        x = rand(np.random.default_rng(h * 31 + w), n, c, h, w)
        kernel = np.zeros((c, c, 3, 3), dtype=np.float32)
        for i in range(c):
            kernel[i, i, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(kernel), Tensor(np.zeros(c)), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x, w, b = rand(rng, 1, 2, 4, 4), rand(rng, 3, 2, 3, 3), rand(rng, 3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 1, 0), atol=1e-5)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0), (3, 2)])
    def test_stride_padding_vs_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x, w, b = rand(rng, 2, 2, 7, 6), rand(rng, 2, 2, 3, 3), rand(rng, 2)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        ref = conv2d_loops(x, w, b, stride, padding)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                   Tensor(np.zeros(1)))
        assert "(1, 2, 4, 4)" in str(exc.value) and "(1, 3, 3, 3)" in str(exc.value)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                   Tensor(np.zeros(1)))


class TestDeconv2d:
    def test_single_element_stamps_kernel(self):
        rng = np.random.default_rng(1)
        kernel = rand(rng, 1, 1, 9, 9)
        out = deconv2d(Tensor(np.full((1, 1, 1, 1), 0.75)), Tensor(kernel),
                       Tensor(np.array([0.125])), stride=4)
        assert out.shape == (1, 1, 9, 9)
        np.testing.assert_allclose(out.data[0, 0], 0.75 * kernel[0, 0] + 0.125, rtol=1e-6)

    def test_matches_adjoint_oracle(self):
        rng = np.random.default_rng(2)
        x, w, b = rand(rng, 2, 3, 3, 4), rand(rng, 3, 2, 5, 5), rand(rng, 2)
        out = deconv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1, output_padding=1)
        ref = deconv2d_loops(x, w, b, 2, 1, 1)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_x4_geometry(self):
        x = Tensor(np.zeros((1, 2, 5, 7)))
        out = deconv2d(x, Tensor(np.zeros((2, 1, 9, 9))), Tensor(np.zeros(1)),
                       stride=4, padding=3, output_padding=1)
        assert out.shape == (1, 1, 20, 28)

    def test_output_padding_must_be_below_stride(self):
        with pytest.raises(ParameterError):
            deconv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                     Tensor(np.zeros(1)), stride=2, output_padding=2)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_of_conv(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        zero4, zero3 = Tensor(np.zeros(4)), Tensor(np.zeros(3))
        y_conv = conv2d(Tensor(x), Tensor(w), zero4, stride=2, padding=1)
        y = rng.standard_normal(y_conv.shape)
        # conv weight (Cout, Cin, k, k) doubles as deconv weight (Cin_d=Cout, Cout_d=Cin, k, k)
        back = deconv2d(Tensor(y), Tensor(w), zero3, stride=2, padding=1, output_padding=1)
        assert back.shape == x.shape
        lhs = float(np.sum(y_conv.data * y))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs))


class TestPrelu:
    def test_branches(self):
        slope = Parameter(np.array([0.25]))
        out = prelu(Tensor(np.array([[3.0, -2.0]]).reshape(1, 1, 2)), slope)
        np.testing.assert_allclose(out.data.ravel(), [3.0, -0.5])

    def test_slope_gradient_is_input_on_negative_branch(self):
        x = Tensor(np.array([[-2.0]]))
        slope = Parameter(np.array([0.25]))
        prelu(x, slope).sum().backward()
        assert slope.grad[0] == pytest.approx(-2.0)

        def f(a):
            return prelu(Tensor(np.array([[-2.0]], dtype=np.float64)), a).sum()

        assert finite_diff_check(f, np.array([0.25])) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            prelu(Tensor(np.zeros((1, 3, 2, 2))), Parameter(np.zeros(2)))


class TestLinear:
    def test_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_arithmetic(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor(3 * np.eye(2)), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data, [[4.0, 7.0]])

    def test_matmul_oracle(self):
        rng = np.random.default_rng(3)
        x, w, b = rand(rng, 4, 5), rand(rng, 5, 3), rand(rng, 3)
        out = linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_loops(x, w) + b, atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 4))), Tensor(np.zeros((5, 3))), Tensor(np.zeros(3)))


class TestLosses:
    def test_mse_identical(self):
        x = Tensor(np.random.default_rng(0).random((2, 3)))
        assert mse_loss(x, x).item() == 0.0

    def test_mse_ones_vs_zeros(self):
        assert mse_loss(Tensor(np.ones((3, 1, 5))), Tensor(np.zeros((3, 1, 5)))).item() == 1.0

    def test_mse_loop_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rand(rng, 3, 7), rand(rng, 3, 7)
        acc = 0.0
        for u, v in zip(a.ravel(), b.ravel()):
            acc += (float(u) - float(v)) ** 2
        assert mse_loss(Tensor(a), Tensor(b)).item() == pytest.approx(acc / a.size, abs=1e-6)

    def test_mse_gradient(self):
        p = Tensor(np.array([1.0, 3.0], dtype=np.float32), requires_grad=True)
        mse_loss(p, Tensor(np.array([0.0, 1.0]))).backward()
        np.testing.assert_allclose(p.grad, [1.0, 2.0])

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
    def test_mse_nonnegative_zero_iff_equal(self, values):
        a = np.array(values, dtype=np.float32)
        assert mse_loss(Tensor(a), Tensor(a.copy())).item() == 0.0
        b = a.copy()
        b[0] += 1.0
        assert mse_loss(Tensor(a), Tensor(b)).item() > 0.0

    @pytest.mark.parametrize("label", [0, 1])
    def test_bce_at_zero(self, label):
        assert bce_with_logits(Tensor([0.0]), label).item() == pytest.approx(math.log(2), abs=1e-7)

    def test_bce_large_logit_is_finite(self):
        assert bce_with_logits(Tensor([50.0]), 0).item() == pytest.approx(50.0, rel=1e-9)
        for z in (-100.0, 100.0):
            for y in (0, 1):
                assert math.isfinite(bce_with_logits(Tensor([z]), y).item())

    def test_bce_per_element_labels(self):
        z = Tensor(np.zeros((1, 1, 2, 2)))
        assert bce_with_logits(z, np.array([[0, 1], [1, 0]])).item() == pytest.approx(math.log(2))


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = Parameter(np.array([0.3, -0.7]))
        before = p.data.copy()
        adam_step(p, AdamConfig())
        np.testing.assert_array_equal(p.data, before)
        np.testing.assert_array_equal(p.adam_m, 0)
        assert p.step_count == 1

    def test_first_step_matches_hand_evaluation(self):
        # t=1: m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
        p = Parameter(np.array([1.0], dtype=np.float64))
        p.grad = np.array([0.1])
        adam_step(p, AdamConfig(learning_rate=0.001))
        expected = -0.001 * 0.1 / (0.1 + 1e-8)
        assert p.data[0] - 1.0 == pytest.approx(expected, rel=1e-9)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_second_identical_gradient_step_similar(self):
        p = Parameter(np.array([0.0], dtype=np.float64))
        deltas = []
        for _ in range(2):
            before = p.data[0]
            p.grad = np.array([0.1])
            adam_step(p, AdamConfig())
            deltas.append(p.data[0] - before)
        # oracle: m_hat = g and v_hat = g^2 exactly at t=2 for a constant gradient
        assert abs(deltas[1] - deltas[0]) <= 0.1 * abs(deltas[0])

    def test_step_count_and_shapes(self):
        p = Parameter(np.zeros((2, 3)))
        for i in range(3):
            p.grad = np.ones((2, 3), dtype=np.float32)
            adam_step(p, AdamConfig())
            assert p.step_count == i + 1
        assert p.adam_m.shape == p.adam_v.shape == p.grad.shape == p.data.shape

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"beta1": 1.0}, {"beta2": 0.0},
                                        {"epsilon": -1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ParameterError):
            AdamConfig(**kwargs)


class TestFiniteDiff:
    def test_sum_of_squares_float32(self):
        def f(x):
            return mse_loss(x, Tensor(np.zeros(x.shape))) * float(x.data.size)

        assert finite_diff_check(f, np.ones(4, dtype=np.float32), eps=1e-3) < 1e-4

    def test_non_scalar_forward_is_rejected(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda x: x, np.ones(3))

    def test_conv_prelu_mse_composite(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)))
        b = Tensor(rng.uniform(-1, 1, 3))
        a = Tensor(np.full(3, 0.25))
        target = Tensor(rng.uniform(-1, 1, (1, 3, 6, 6)))

        def f(x):
            return mse_loss(prelu(conv2d(x, w, b, padding=1), a), target)

        assert finite_diff_check(f, rng.uniform(-1, 1, (1, 2, 6, 6))) < 1e-3

    def test_deconv_stage(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.uniform(-1, 1, (3, 1, 9, 9)))
        b = Tensor(np.zeros(1))
        target = Tensor(rng.uniform(-1, 1, (1, 1, 12, 12)))

        def f(x):
            return mse_loss(deconv2d(x, w, b, stride=4, padding=3, output_padding=1), target)

        assert finite_diff_check(f, rng.uniform(-1, 1, (1, 3, 3, 3))) < 1e-3


class TestGraph:
    def test_gradients_accumulate_across_backward_calls(self):
        p = Parameter(np.array([2.0]))
        for _ in range(2):
            mse_loss(p, Tensor([0.0])).backward()
        np.testing.assert_allclose(p.grad, [8.0])

    def test_shared_subexpression(self):
        p = Parameter(np.array([[1.5]]))
        y = linear(p, Tensor([[2.0]]), Tensor([0.0]))
        (y + y).sum().backward()
        np.testing.assert_allclose(p.grad, [[4.0]])

    def test_detach_blocks_gradient(self):
        p = Parameter(np.array([[1.0]]))
        y = linear(p, Tensor([[2.0]]), Tensor([0.0])).detach()
        z = linear(y, Tensor([[1.0]]), Tensor([0.0]))
        z.sum().backward()
        np.testing.assert_array_equal(p.grad, 0)

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        x, w, b = rand(rng, 2, 3, 9, 9), rand(rng, 4, 3, 3, 3), rand(rng, 4)
        runs = [conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data for _ in range(2)]
        assert runs[0].tobytes() == runs[1].tobytes()

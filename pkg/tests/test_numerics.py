import math

import numpy as np
import pytest

from aotpeft.errors import ConfigError, NumericError, ShapeError
from aotpeft.numerics import (
    GradPair,
    activation,
    activation_backward,
    finite_diff_grad,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    make_rng,
    matmul,
    matmul_backward,
    relative_error,
    softmax_rows,
    softmax_rows_backward,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_hand_expanded_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        # rows of a dotted with columns of b, expanded by hand
        expected = np.array([[19.0, 22.0], [43.0, 50.0]])
        assert np.allclose(matmul(a, b), expected, atol=0)

    def test_one_by_one(self):
        assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = make_rng(0, "assoc")
        for _ in range(5):
            a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.abs(left - right).max() < 1e-10


class TestSoftmaxRows:
    def test_symmetric_pair(self):
        assert np.allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_log_ratio_closed_form(self):
        out = softmax_rows(np.array([[math.log(2.0), 0.0]]))
        assert np.allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_huge_logit_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)

    def test_rows_sum_to_one(self):
        rng = make_rng(1, "softmax")
        for _ in range(20):
            m = rng.uniform(-50, 50, size=(6, 9))
            sums = softmax_rows(m).sum(axis=1)
            assert np.abs(sums - 1.0).max() < 1e-12

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            softmax_rows(np.array([[np.nan, 0.0]]))


class TestLayerNorm:
    def test_constant_row_zeroed(self):
        x = np.full((1, 4), 3.7)
        out = layer_norm(x, np.ones(4), np.zeros(4), eps=1e-5)
        assert np.abs(out).max() < 1e-9

    def test_gamma_zero_gives_beta(self):
        x = np.arange(8.0).reshape(2, 4)
        out = layer_norm(x, np.zeros(4), np.full(4, 2.5), eps=1e-5)
        assert np.array_equal(out, np.full((2, 4), 2.5))

    def test_two_point_row(self):
        out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=0.0)
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-12)


class TestActivation:
    def test_relu(self):
        assert np.array_equal(activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])

    def test_tanh_zero(self):
        assert activation(np.array([0.0]), "tanh")[0] == 0.0

    def test_gelu_zero(self):
        assert activation(np.array([0.0]), "gelu")[0] == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            activation(np.zeros(2), "swish")


class TestFiniteDiff:
    def test_square(self):
        grad = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-5)
        assert abs(grad[0] - 6.0) < 1e-7

    def test_sum(self):
        grad = finite_diff_grad(lambda x: float(x.sum()), np.zeros(5), eps=1e-5)
        assert np.allclose(grad, 1.0, atol=1e-9)

    def test_restores_input(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float((v**2).sum()), x)
        assert np.array_equal(x, [1.0, 2.0])


class TestBackwardOracles:
    """Each analytic backward against central differences, 20 seeds."""

    def test_matmul_backward(self):
        for seed in range(20):
            rng = make_rng(seed, "mm")
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 5))
            g = rng.standard_normal((3, 5))
            da, db = matmul_backward(g, a, b)
            fda = finite_diff_grad(lambda x: float((matmul(x, b) * g).sum()), a)
            fdb = finite_diff_grad(lambda x: float((matmul(a, x) * g).sum()), b)
            assert relative_error(da, fda) < 1e-4
            assert relative_error(db, fdb) < 1e-4

    def test_softmax_backward(self):
        for seed in range(20):
            rng = make_rng(seed, "sm")
            x = rng.standard_normal((2, 6))
            g = rng.standard_normal((2, 6))
            probs = softmax_rows(x)
            dx = softmax_rows_backward(g, probs)
            fd = finite_diff_grad(lambda v: float((softmax_rows(v) * g).sum()), x)
            assert relative_error(dx, fd) < 1e-4

    def test_layer_norm_backward(self):
        for seed in range(20):
            rng = make_rng(seed, "ln")
            x = rng.standard_normal((3, 8))
            gamma = rng.standard_normal(8)
            beta = rng.standard_normal(8)
            g = rng.standard_normal((3, 8))
            _, cache = layer_norm_forward(x, gamma, beta)
            dx, dgamma, dbeta = layer_norm_backward(g, cache)
            fdx = finite_diff_grad(lambda v: float((layer_norm(v, gamma, beta) * g).sum()), x)
            fdg = finite_diff_grad(lambda v: float((layer_norm(x, v, beta) * g).sum()), gamma)
            fdb = finite_diff_grad(lambda v: float((layer_norm(x, gamma, v) * g).sum()), beta)
            assert relative_error(dx, fdx) < 1e-4
            assert relative_error(dgamma, fdg) < 1e-4
            assert relative_error(dbeta, fdb) < 1e-4

    @pytest.mark.parametrize("kind", ["relu", "tanh", "gelu"])
    def test_activation_backward(self, kind):
        for seed in range(20):
            rng = make_rng(seed, "act", kind)
            x = rng.standard_normal(12) + 0.05  # keep relu off its kink
            g = rng.standard_normal(12)
            dx = activation_backward(g, x, kind)
            fd = finite_diff_grad(lambda v: float((activation(v, kind) * g).sum()), x)
            assert relative_error(dx, fd) < 1e-4


class TestGradPair:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            GradPair(np.zeros(3), np.zeros(4))

    def test_frozen_has_no_grad(self):
        assert not GradPair(np.zeros(3)).trainable
        assert GradPair(np.zeros(3), np.zeros(3)).trainable


def test_rng_streams_are_stable():
    a = make_rng(7, "stream", 1).standard_normal(4)
    b = make_rng(7, "stream", 1).standard_normal(4)
    c = make_rng(7, "stream", 2).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)

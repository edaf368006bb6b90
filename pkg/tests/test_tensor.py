"""Autodiff engine: values, gradients, and graph semantics."""

import numpy as np
import pytest

from milbag import tensor as T
from milbag.errors import ContractError, DimensionError
from milbag.gradcheck import max_relative_error
from milbag.tensor import Tensor


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_elementwise_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.mul(x, x).backward()

    def test_backward_twice_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)

        def run():
            T.tsum(T.mul(x, x)).backward()

        run()
        first = x.grad.copy()
        run()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_reused_leaf_accumulates_all_contributions(self):
        # loss = sum(x*x) + sum(3x): grad = 2x + 3
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        loss = T.add(T.tsum(T.mul(x, x)), T.tsum(T.scale(x, 3.0)))
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad
        assert y._backward is None

    def test_grad_matches_data_shape(self):
        x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
        T.tsum(T.tanh(x)).backward()
        assert x.grad.shape == x.data.shape


class TestOpValues:
    def test_matmul_shape_errors(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((4, 2)))
        with pytest.raises(DimensionError):
            T.matmul(a, b)

    def test_softmax_is_simplex(self):
        rng = np.random.default_rng(1)
        s = T.softmax(Tensor(rng.normal(size=(9, 1))), axis=0)
        assert s.data.min() > 0
        np.testing.assert_allclose(s.data.sum(), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(11, 1))
        base = T.softmax(Tensor(x), axis=0).data
        shifted = T.softmax(Tensor(x + 123.456), axis=0).data
        assert np.abs(base - shifted).max() <= 1e-9
        assert base.argmax() == shifted.argmax()

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 6)))
        np.testing.assert_allclose(T.log_softmax(x, axis=1).data,
                                   np.log(T.softmax(x, axis=1).data), atol=1e-12)

    def test_sum_accumulates_in_float64(self):
        # 2^24 + 1 is not representable in float32; a float32 accumulator
        # would silently drop the +1 contributions
        x = Tensor(np.full(4, 2 ** 22, dtype=np.float32))
        assert T.tsum(x).item() == 2 ** 24

    def test_clamp_values_and_mask(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        y = T.clamp(x, 0.0, 1.0)
        np.testing.assert_array_equal(y.data, [0.0, 0.5, 1.0])
        T.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_gather_rows_scatter_adds(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(3, 2), requires_grad=True)
        y = T.gather_rows(x, [0, 0, 2])
        T.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        T.tsum(T.mul(out, out)).backward()
        assert a.grad.shape == (2, 2) and b.grad.shape == (3, 2)


class TestCompositeGradients:
    """Random composites of engine ops against central finite differences."""

    @pytest.mark.parametrize("seed", range(5))
    def test_random_composite(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=(4, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(5, 3)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, size=(4, 3)))

        def f():
            h = T.tanh(T.matmul(x, w))
            s = T.softmax(h, axis=1)
            return T.tsum(T.mul(T.log(T.clamp(T.sigmoid(s), 1e-6, 1.0)), proj))

        assert max_relative_error(f, [x, w]) < 1e-4

    def test_conv_pool_composite(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.uniform(-1, 1, size=(2, 6, 6, 3)), requires_grad=True)
        w = Tensor(rng.uniform(-0.5, 0.5, size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-0.1, 0.1, size=4), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, size=(2, 2, 2, 4)))

        def f():
            y = T.conv2d_nhwc(x, w, b)
            p = T.maxpool2d_nhwc(y, 2, 2)
            return T.tsum(T.mul(p, proj))

        assert max_relative_error(f, [x, w, b]) < 1e-4


class TestDeterminism:
    def test_identical_seeds_identical_composite(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.uniform(-1, 1, size=(3, 8, 8, 2)).astype(np.float32),
                       requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, size=(4, 2, 3, 3)).astype(np.float32),
                       requires_grad=True)
            y = T.maxpool2d_nhwc(T.relu(T.conv2d_nhwc(x, w)), 2, 2)
            T.tsum(y).backward()
            return y.data.copy(), w.grad.copy()

        y1, g1 = run()
        y2, g2 = run()
        assert np.array_equal(y1, y2)
        assert np.array_equal(g1, g2)

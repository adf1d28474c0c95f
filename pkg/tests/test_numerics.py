"""
Tests for the autodiff tensor, its ops and the optimizer
"""

import numpy as np
import pytest

from diffcodec.errors import NumericsError, ShapeMismatchError
from diffcodec.numerics import (Adam, Tensor, add, clip, concat, conv2d, conv_transpose2d, div, exp,
                                gradients, interval_bits, is_grad_enabled, log, matmul, mean, minimum,
                                mse, mul, no_grad, relu, reshape, sigmoid, silu, softmax, sub,
                                tensor_sum, upsample_nearest)

EPS = 1e-6


def numeric_grad(fn, arrays, index):
    """Central differences of the scalar fn(*arrays) with respect to arrays[index]"""
    base = arrays[index]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + EPS
        plus = fn(*arrays)
        base[idx] = orig - EPS
        minus = fn(*arrays)
        base[idx] = orig
        grad[idx] = (plus - minus) / (2 * EPS)
    return grad


def check_gradients(op, arrays, rng):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    def scalar(*values):
        return float((op(*[Tensor(v.copy()) for v in values]).data * weights).sum())

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = (op(*inputs) * Tensor(weights)).sum()
    loss.backward()
    for i, tensor in enumerate(inputs):
        expected = numeric_grad(scalar, arrays, i)
        np.testing.assert_allclose(tensor.grad, expected, rtol=1e-3, atol=1e-4)


def random_shape(rng, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(d) for d in rng.integers(1, 5, size=ndim))


def away_from(values, points, margin=0.05):
    """Push entries at least ``margin`` away from each kink point"""
    values = values.copy()
    for p in points:
        close = np.abs(values - p) < margin
        values[close] = p + margin * np.where(values[close] >= p, 1.0, -1.0) * 2
    return values


SEEDS = range(20)


class TestElementwiseGradients:
    """Finite-difference checks for elementwise and broadcasting ops"""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_sub_mul_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, 3)
        other = (1,) + shape[1:]
        a, b = rng.normal(size=shape), rng.normal(size=other)
        check_gradients(add, [a, b], rng)
        check_gradients(sub, [a, b], rng)
        check_gradients(mul, [a, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_div(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        b = rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        check_gradients(div, [rng.normal(size=shape), b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_activations(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from(rng.normal(size=random_shape(rng)), [0.0])
        for op in (relu, sigmoid, silu, exp):
            check_gradients(op, [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log(self, seed):
        rng = np.random.default_rng(seed)
        check_gradients(log, [rng.uniform(0.2, 3.0, size=random_shape(rng))], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        check_gradients(softmax, [rng.normal(size=random_shape(rng, 2))], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_clip_and_minimum(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        x = away_from(rng.uniform(0.5, 1.5, size=shape), [0.8, 1.2])
        check_gradients(lambda t: clip(t, 0.8, 1.2), [x], rng)
        a = rng.normal(size=shape)
        b = a + rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)
        check_gradients(minimum, [a, b], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_interval_bits(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        z = away_from(rng.normal(size=shape), [0.0], margin=0.1)
        scale = rng.uniform(0.8, 2.0, size=shape)
        check_gradients(lambda t: interval_bits(t, scale), [z], rng)


class TestReductionAndShapeGradients:
    """Finite-difference checks for reductions, reshapes and matmul"""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sum_and_mean(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=random_shape(rng, 3))
        check_gradients(lambda t: tensor_sum(t, axis=1), [x], rng)
        check_gradients(lambda t: mean(t, axis=(0, 2), keepdims=True), [x], rng)
        check_gradients(mean, [x], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        n, k, m = (int(d) for d in rng.integers(1, 6, size=3))
        check_gradients(matmul, [rng.normal(size=(n, k)), rng.normal(size=(k, m))], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        check_gradients(mse, [rng.normal(size=shape), rng.normal(size=shape)], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reshape_concat_upsample(self, seed):
        rng = np.random.default_rng(seed)
        n, c, h, w = (int(d) for d in rng.integers(1, 4, size=4))
        x = rng.normal(size=(n, c, h, w))
        y = rng.normal(size=(n, 2, h, w))
        check_gradients(lambda t: reshape(t, (n, c * h * w)), [x], rng)
        check_gradients(lambda a, b: concat([a, b], axis=1), [x, y], rng)
        check_gradients(lambda t: upsample_nearest(t, 2), [x], rng)


class TestConvolutionGradients:
    """Finite-difference checks for the two convolution ops"""

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(4, 7)), int(rng.integers(4, 7))
        x = rng.normal(size=(1, c_in, h, w))
        weight = rng.normal(size=(c_out, c_in, 3, 3))
        bias = rng.normal(size=(c_out,))
        check_gradients(lambda a, b, c: conv2d(a, b, c, stride=stride, padding=padding),
                        [x, weight, bias], rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_transpose2d(self, seed):
        rng = np.random.default_rng(seed)
        c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = rng.normal(size=(1, c_in, 3, 4))
        weight = rng.normal(size=(c_in, c_out, 4, 4))
        bias = rng.normal(size=(c_out,))
        check_gradients(lambda a, b, c: conv_transpose2d(a, b, c, stride=2, padding=1),
                        [x, weight, bias], rng)

    def test_conv_transpose_doubles_resolution(self):
        x = Tensor(np.ones((1, 2, 5, 3)))
        weight = Tensor(np.ones((2, 4, 4, 4)))
        assert conv_transpose2d(x, weight, stride=2, padding=1).shape == (1, 4, 10, 6)

    def test_conv2d_matches_direct_sum(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 5, 5))
        weight = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(weight)).data
        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * weight[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestGraphBehaviour:
    """Backward traversal, grad mode and error reporting"""

    def test_shared_node_accumulates(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        y = (x * x + x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [4.0, -3.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NumericsError):
            (x * 2.0).backward()

    def test_item_needs_single_element(self):
        assert Tensor([[2.5]]).item() == 2.5
        with pytest.raises(ValueError, match="single-element"):
            Tensor([1.0, 2.0]).item()

    def test_no_grad_skips_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = x * 3.0
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_non_finite_result_raises(self):
        with pytest.raises(NumericsError):
            exp(Tensor([1000.0]))

    def test_log_of_non_positive_raises(self):
        with pytest.raises(NumericsError):
            log(Tensor([0.0, 1.0]))

    def test_shape_mismatch_names_operation(self):
        with pytest.raises(ShapeMismatchError) as info:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert info.value.op == "matmul"
        assert info.value.shapes == [(2, 3), (2, 3)]

    def test_clip_blocks_gradient_outside_bounds(self):
        x = Tensor([0.5, 1.0, 1.5], requires_grad=True)
        clip(x, 0.8, 1.2).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = softmax(Tensor(rng.normal(size=(4, 5)) * 50)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(4))

    def test_interval_bits_of_zero_symbol(self):
        bits = interval_bits(Tensor([0.0]), np.array([1.0])).item()
        # mass of N(0, 1) on [-0.5, 0.5] is 0.382925
        assert bits == pytest.approx(-np.log2(0.3829249225480262), rel=1e-9)


class TestAdam:
    """Optimizer behaviour"""

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        optimizer = Adam([w], lr=0.1)
        for _ in range(300):
            optimizer.zero_grad()
            ((w - Tensor([1.0, 0.5])) * (w - Tensor([1.0, 0.5]))).sum().backward()
            optimizer.step()
        np.testing.assert_allclose(w.data, [1.0, 0.5], atol=1e-2)

    def test_first_step_moves_by_learning_rate(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        optimizer = Adam([w], lr=0.01)
        optimizer.step([np.array([5.0])])
        assert w.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_non_finite_gradient_refused(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([2.0]), requires_grad=True)
        optimizer = Adam([a, b], lr=0.1)
        with pytest.raises(NumericsError):
            optimizer.step([np.array([1.0]), np.array([np.nan])])
        assert a.data[0] == 1.0 and b.data[0] == 2.0
        assert optimizer.state.step == 0

    def test_gradients_zero_for_unused_parameter(self):
        used = Tensor(np.array([2.0]), requires_grad=True)
        unused = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        grads = gradients((used * used).sum(), [used, unused])
        np.testing.assert_allclose(grads[0], [4.0])
        np.testing.assert_array_equal(grads[1], [0.0, 0.0])

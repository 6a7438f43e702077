import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from . import tensor as T
from .errors import ShapeError, UsageError
from .tensor import Axis, Mode


def _weight(value, name="w"):
    value = np.asarray(value, dtype=np.float32)
    w = T.DenseWeight.create(name, *value.shape)
    w.value[...] = value
    return w


def test_as_tensor4_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        T.as_tensor4(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        T.as_tensor4(np.zeros((2, 0, 4, 4)))
    assert T.as_tensor4(np.zeros((1, 1, 1, 1))).shape == (1, 1, 1, 1)


def test_element_bounds():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    assert T.element(x, 0, 0, 3, 2) == 14.0
    with pytest.raises(IndexError):
        T.element(x, 0, 0, 4, 0)
    with pytest.raises(IndexError):
        T.element(x, 0, 0, -1, 0)


def test_linear_along_axis_examples():
    x = np.array([1, 2], dtype=np.float32).reshape(1, 1, 1, 2)
    assert_array_equal(T.linear_along_axis(x, _weight(np.eye(2)), Axis.width), x)

    x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2)
    out = T.linear_along_axis(x, _weight([[1, 0], [1, 0]]), Axis.height)
    assert_array_equal(out[0, 0], [[4, 6], [0, 0]])

    x = np.zeros((2, 3, 8, 8), dtype=np.float32)
    out = T.linear_along_axis(x, T.DenseWeight.create("w", 8, 4), Axis.width)
    assert out.shape == (2, 3, 8, 4)


@pytest.mark.parametrize("axis,subscripts", [
    (Axis.width, "nchi,ij->nchj"),
    (Axis.height, "nciw,ij->ncjw"),
    (Axis.channel, "nihw,ij->njhw"),
])
def test_linear_along_axis_matches_einsum(axis, subscripts):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 5))
    rows = x.shape[T.AXIS_INDEX[axis]]
    w = T.DenseWeight.create("w", rows, 6, dtype=np.float64)
    w.value[...] = rng.standard_normal(w.value.shape)

    out = T.linear_along_axis(x, w, axis)
    assert_allclose(out, np.einsum(subscripts, x, w.value), rtol=1e-12)

    g = rng.standard_normal(out.shape)
    gx = T.linear_along_axis_backward(g, x, w, axis)
    assert gx.shape == x.shape
    # <g, f(x)> = <f^T(g), x> for a linear map.
    assert_allclose(np.sum(g * out), np.sum(gx * x), rtol=1e-10)


def test_linear_is_linear():
    rng = np.random.default_rng(1)
    w1 = _weight(rng.standard_normal((5, 3)))
    w2 = _weight(rng.standard_normal((4, 2)))

    def f(v):
        return T.linear_along_axis(T.linear_along_axis(v, w1, Axis.width), w2,
                                   Axis.height)

    x = rng.standard_normal((2, 2, 4, 5)).astype(np.float32)
    y = rng.standard_normal((2, 2, 4, 5)).astype(np.float32)
    assert_allclose(f(2.0 * x - 3.0 * y), 2.0 * f(x) - 3.0 * f(y), atol=1e-5)


def test_linear_identity_backward_and_accumulation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    g = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    w = _weight(np.eye(3))

    assert_array_equal(T.linear_along_axis_backward(g, x, w, Axis.width), g)
    first = w.grad.copy()
    T.linear_along_axis_backward(g, x, w, Axis.width)
    assert_allclose(w.grad, 2 * first)


def test_linear_shape_errors():
    x = np.zeros((1, 1, 2, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        T.linear_along_axis(x, T.DenseWeight.create("w", 2, 2), Axis.width)
    w = T.DenseWeight.create("w", 3, 2)
    with pytest.raises(ShapeError):
        T.linear_along_axis_backward(np.zeros((1, 1, 2, 3)), x, w, Axis.width)


def test_linear_keeps_dtype():
    w = T.DenseWeight.create("w", 3, 2, dtype=np.float64)
    out = T.linear_along_axis(np.ones((1, 1, 1, 3)), w, Axis.width)
    assert out.dtype == np.float64


def test_batchnorm_constant_input_is_zero():
    bn = T.BatchNormState.create("bn", 2)
    x = np.ones((3, 2, 2, 2), dtype=np.float32) * np.array([5, -1], dtype=np.float32)[
        None, :, None, None]
    assert_array_equal(T.batchnorm_forward(x, bn, Mode.train), 0)


def test_batchnorm_affine_and_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    bn = T.BatchNormState.create("bn", 2)
    out = T.batchnorm_forward(x, bn, Mode.train)
    assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    x_hat = out.copy()

    bn.gamma.value[...] = 2
    bn.beta.value[...] = 3
    assert_allclose(T.batchnorm_forward(x, bn, Mode.train), 2 * x_hat + 3, atol=1e-5)


def test_batchnorm_running_stats():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 2, 2))
    bn = T.BatchNormState.create("bn", 3, dtype=np.float64)
    T.batchnorm_forward(x, bn, Mode.train)

    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    assert_allclose(bn.running_mean, 0.1 * mean)
    assert_allclose(bn.running_var, 0.9 + 0.1 * var)

    out = T.batchnorm_forward(x, bn, Mode.eval)
    expect = (x - bn.running_mean[None, :, None, None]) / np.sqrt(
        bn.running_var[None, :, None, None] + bn.eps)
    assert_allclose(out, expect, rtol=1e-10)


def test_batchnorm_gamma_grad_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 2, 3))
    g = rng.standard_normal(x.shape)
    bn = T.BatchNormState.create("bn", 2, dtype=np.float64)
    x_hat = T.batchnorm_forward(x, bn, Mode.train)
    T.batchnorm_backward(g, bn)
    assert_allclose(bn.gamma.grad, np.sum(g * x_hat, axis=(0, 2, 3)))
    assert_allclose(bn.beta.grad, np.sum(g, axis=(0, 2, 3)))


def test_batchnorm_backward_requires_forward():
    with pytest.raises(UsageError):
        T.batchnorm_backward(np.zeros((1, 1, 1, 1)), T.BatchNormState.create("bn", 1))


def test_prelu():
    p = T.PReluState.create("act", 0.25)
    x = np.array([-4, 2], dtype=np.float32).reshape(1, 1, 1, 2)
    assert_array_equal(T.prelu_forward(x, p).ravel(), [-1, 2])

    g = np.array([1, 1], dtype=np.float32).reshape(x.shape)
    assert_array_equal(T.prelu_backward(g, x, p).ravel(), [0.25, 1])
    assert_allclose(p.slope_grad, [-4])


def test_prelu_slope_one_is_identity():
    p = T.PReluState.create("act", 1.0)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    assert_array_equal(T.prelu_forward(x, p), x)
    assert_array_equal(T.prelu_backward(g, x, p), g)

    relu = T.PReluState.create("act", 0.0)
    assert_array_equal(T.prelu_forward(x, relu), np.maximum(x, 0))


def test_global_average_pool():
    x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2)
    assert_array_equal(T.global_average_pool(x), [[2.5]])
    grad = T.global_average_pool_backward(np.array([[4.0]]), x.shape)
    assert_array_equal(grad, np.ones((1, 1, 2, 2)))


def test_softmax_cross_entropy_uniform():
    loss, grad = T.softmax_cross_entropy(np.zeros((2, 10)), np.array([3, 7]))
    assert loss == pytest.approx(math.log(10))
    assert_allclose(grad.sum(axis=1), 0, atol=1e-12)
    assert grad[0, 3] == pytest.approx((0.1 - 1) / 2)


def test_softmax_cross_entropy_matches_direct_evaluation():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((3, 4)) * 5
    labels = np.array([0, 3, 1])
    loss, grad = T.softmax_cross_entropy(logits, labels)

    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expect = -np.mean(np.log(probs[np.arange(3), labels]))
    assert loss == pytest.approx(expect, abs=1e-6)
    onehot = np.eye(4)[labels]
    assert_allclose(grad, (probs - onehot) / 3, atol=1e-12)


def test_softmax_cross_entropy_is_stable():
    loss, _ = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0)


def test_softmax_cross_entropy_errors():
    with pytest.raises(UsageError):
        T.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(ShapeError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_xavier_init():
    assert T.xavier_bound(3, 3) == pytest.approx(1.0)

    w = T.DenseWeight.create("w", 3, 3)
    T.xavier_init(w, np.random.default_rng(0))
    assert np.all(np.abs(w.value) <= 1.0)

    w2 = T.DenseWeight.create("w", 3, 3)
    T.xavier_init(w2, np.random.default_rng(0))
    assert_array_equal(w.value, w2.value)

    big = T.DenseWeight.create("w", 1000, 100, dtype=np.float64)
    T.xavier_init(big, np.random.default_rng(1))
    a = T.xavier_bound(1000, 100)
    assert big.value.var() == pytest.approx(a * a / 3, rel=0.05)

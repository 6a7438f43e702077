"""
Dense tensor primitives with explicit forward and backward passes.

Activations and gradients are plain numpy arrays laid out as (N, C, H, W),
row-major. Every op keeps the dtype of its inputs: production runs in float32
and the gradient-check harness reruns the same code in float64.
"""
import math
import typing as t
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeError, UsageError

# A rank-4 (N, C, H, W) array.
Tensor4 = np.ndarray

DTYPE = np.float32


class Axis(str, Enum):
    width = "width"
    height = "height"
    channel = "channel"


AXIS_INDEX = {Axis.width: 3, Axis.height: 2, Axis.channel: 1}


class Mode(str, Enum):
    train = "train"
    eval = "eval"


def as_tensor4(x, dtype=None) -> Tensor4:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(
            f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def element(x: Tensor4, n: int, c: int, h: int, w: int) -> float:
    """Bounds-checked element read; negative indices are not wrapped."""
    for idx, extent, name in zip((n, c, h, w), x.shape, "nchw"):
        if not 0 <= idx < extent:
            raise IndexError(f"index {name}={idx} out of range for extent {extent}")
    return float(x[n, c, h, w])


@dataclass(eq=False)
class Param:
    """A learnable array and its gradient accumulator."""
    name: str
    value: np.ndarray
    # Whether SGD weight decay applies.
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(eq=False)
class DenseWeight(Param):
    """A rows x cols matrix mapping an input extent (rows) to an output extent."""

    @classmethod
    def create(cls, name: str, rows: int, cols: int, dtype=DTYPE) -> 'DenseWeight':
        if rows < 1 or cols < 1:
            raise ShapeError(f"{name}: dense weight extents must be >= 1")
        return cls(name, np.zeros((rows, cols), dtype=dtype))

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]


@dataclass(eq=False)
class BatchNormState:
    name: str
    features: int
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    # Reduction axes; the remaining axis holds the features.
    reduce_axes: t.Tuple[int, ...] = (0, 2, 3)
    # (x_hat, inv_std) from the last train-mode forward.
    cache: t.Optional[t.Tuple[np.ndarray, np.ndarray]] = None

    @classmethod
    def create(cls, name: str, features: int, dtype=DTYPE,
               momentum: float = 0.1, eps: float = 1e-5) -> 'BatchNormState':
        return cls(
            name=name,
            features=features,
            gamma=Param(f"{name}.gamma", np.ones(features, dtype=dtype), decay=False),
            beta=Param(f"{name}.beta", np.zeros(features, dtype=dtype), decay=False),
            running_mean=np.zeros(features, dtype=dtype),
            running_var=np.ones(features, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def feature_axis(self) -> int:
        return [i for i in range(4) if i not in self.reduce_axes][0]

    def params(self) -> t.List[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> t.List[t.Tuple[str, np.ndarray]]:
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def _bshape(self) -> t.Tuple[int, ...]:
        shape = [1, 1, 1, 1]
        shape[self.feature_axis] = self.features
        return tuple(shape)


@dataclass(eq=False)
class PReluState:
    """One learnable negative-side slope shared by a whole activation site."""
    slope: Param

    @classmethod
    def create(cls, name: str, init: float = 0.25, dtype=DTYPE) -> 'PReluState':
        return cls(Param(f"{name}.slope", np.full(1, init, dtype=dtype), decay=False))

    @property
    def slope_grad(self) -> np.ndarray:
        return self.slope.grad


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    The single dense kernel every axis-wise map goes through. numpy hands this
    to BLAS, which parallelizes over output panels.
    """
    return np.matmul(a, b)


def _panels(x: np.ndarray, axis_idx: int) -> t.Tuple[np.ndarray, t.Tuple[int, ...]]:
    moved = np.moveaxis(x, axis_idx, -1)
    return moved.reshape(-1, moved.shape[-1]), moved.shape[:-1]


def _stacks(x: np.ndarray, axis_idx: int) -> t.Tuple[np.ndarray, t.Tuple[int, ...]]:
    """Like `_panels` but one (rows, extent) panel per sample, so a sample's
    result never depends on what else is in the batch."""
    moved = np.moveaxis(x, axis_idx, -1)
    return moved.reshape(moved.shape[0], -1, moved.shape[-1]), moved.shape[:-1]


def _unpanel(panel: np.ndarray, lead: t.Tuple[int, ...], axis_idx: int) -> np.ndarray:
    return np.ascontiguousarray(
        np.moveaxis(panel.reshape(*lead, panel.shape[-1]), -1, axis_idx))


def linear_along_axis(x: Tensor4, w: DenseWeight, axis: Axis) -> Tensor4:
    """
    Apply `w` to every vector sliced along `axis`:
    out[..., j, ...] = sum_i w[i, j] * x[..., i, ...].
    """
    axis = Axis(axis)
    ax = AXIS_INDEX[axis]
    if x.shape[ax] != w.rows:
        raise ShapeError(
            f"{axis.value} extent {x.shape[ax]} doesn't match weight rows {w.rows}"
            f" ({w.name})")
    stack, lead = _stacks(x, ax)
    return _unpanel(matmul(stack, w.value), lead, ax)


def linear_along_axis_backward(
        grad_out: Tensor4, cached_x: Tensor4, w: DenseWeight, axis: Axis) -> Tensor4:
    """Return dL/dx and add dL/dw into `w.grad`."""
    axis = Axis(axis)
    ax = AXIS_INDEX[axis]
    expected = list(cached_x.shape)
    if expected[ax] != w.rows:
        raise ShapeError(f"cached input doesn't match {w.name} along {axis.value}")
    expected[ax] = w.cols
    if tuple(grad_out.shape) != tuple(expected):
        raise ShapeError(
            f"grad shape {grad_out.shape} doesn't match forward output "
            f"{tuple(expected)}")

    g, lead = _panels(grad_out, ax)
    xp, _ = _panels(cached_x, ax)
    w.grad += matmul(xp.T, g)
    return _unpanel(matmul(g, w.value.T), lead, ax)


def batchnorm_forward(x: Tensor4, bn: BatchNormState, mode: Mode) -> Tensor4:
    fa = bn.feature_axis
    if x.shape[fa] != bn.features:
        raise ShapeError(
            f"{bn.name}: feature extent {x.shape[fa]} doesn't match {bn.features}")
    shape = bn._bshape()
    gamma = bn.gamma.value.reshape(shape)
    beta = bn.beta.value.reshape(shape)

    if Mode(mode) is Mode.eval:
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps).astype(x.dtype)
        x_hat = (x - bn.running_mean.reshape(shape)) * inv_std.reshape(shape)
        return gamma * x_hat + beta

    mean = x.mean(axis=bn.reduce_axes, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=bn.reduce_axes, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + bn.eps)).astype(x.dtype)
    x_hat = centered * inv_std
    bn.cache = (x_hat, inv_std)

    count = x.size // bn.features
    unbiased = var.reshape(-1) * (count / max(count - 1, 1))
    m = bn.momentum
    bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean.reshape(-1)
    bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased

    return gamma * x_hat + beta


def batchnorm_backward(grad_out: Tensor4, bn: BatchNormState) -> Tensor4:
    if bn.cache is None:
        raise UsageError(f"{bn.name}: backward called without a train-mode forward")
    x_hat, inv_std = bn.cache
    if grad_out.shape != x_hat.shape:
        raise ShapeError(f"{bn.name}: grad shape {grad_out.shape} != {x_hat.shape}")

    axes = bn.reduce_axes
    shape = bn._bshape()
    count = x_hat.size // bn.features

    bn.gamma.grad += np.sum(grad_out * x_hat, axis=axes).reshape(-1)
    bn.beta.grad += np.sum(grad_out, axis=axes).reshape(-1)

    dx_hat = grad_out * bn.gamma.value.reshape(shape)
    sum_dx_hat = np.sum(dx_hat, axis=axes, keepdims=True)
    sum_dx_hat_xhat = np.sum(dx_hat * x_hat, axis=axes, keepdims=True)
    return (inv_std / count) * (count * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)


def prelu_forward(x: Tensor4, p: PReluState) -> Tensor4:
    slope = p.slope.value[0]
    return np.where(x > 0, x, slope * x)


def prelu_backward(grad_out: Tensor4, cached_x: Tensor4, p: PReluState) -> Tensor4:
    if grad_out.shape != cached_x.shape:
        raise ShapeError(
            f"{p.slope.name}: grad shape {grad_out.shape} != {cached_x.shape}")
    positive = cached_x > 0
    p.slope.grad[0] += np.sum(np.where(positive, 0, grad_out * cached_x))
    return np.where(positive, grad_out, p.slope.value[0] * grad_out)


def global_average_pool(x: Tensor4) -> np.ndarray:
    """Reduce each channel's spatial map to its mean: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).mean(axis=-1)


def global_average_pool_backward(
        grad_out: np.ndarray, in_shape: t.Sequence[int]) -> Tensor4:
    n, c, h, w = in_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"pool grad shape {grad_out.shape} != {(n, c)}")
    scaled = grad_out / (h * w)
    return np.ascontiguousarray(
        np.broadcast_to(scaled[:, :, None, None], (n, c, h, w)))


def softmax_cross_entropy(
        logits: np.ndarray, labels: np.ndarray) -> t.Tuple[float, np.ndarray]:
    """
    Mean negative log-likelihood of the true class and its gradient
    (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)

    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(n)
    loss = -float(np.mean(log_probs[rows, labels], dtype=np.float64))

    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def xavier_bound(rows: int, cols: int) -> float:
    return math.sqrt(6.0 / (rows + cols))


def xavier_init(w: DenseWeight, rng: np.random.Generator) -> None:
    """Uniform Glorot init on [-a, a], a = sqrt(6 / (rows + cols))."""
    a = xavier_bound(w.rows, w.cols)
    w.value[...] = rng.uniform(-a, a, size=w.value.shape).astype(w.value.dtype)


def zero_init(p: Param) -> None:
    p.value[...] = 0


def constant_init(p: Param, value: float) -> None:
    p.value[...] = value

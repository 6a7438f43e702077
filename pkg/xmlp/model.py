"""
The pyramidal X-MLP classifier: a stack of X-MLP layers, global average
pooling over (H, W) and a linear head with bias.
"""
import typing as t

import numpy as np

from . import tensor as T
from .config import ModelSpec
from .errors import ShapeError, UsageError
from .layers import LayerSpec, XLayer, build_layer
from .logging import get_logger
from .tensor import Mode, Param

logger = get_logger()


def _halve(extent: int, floor: int) -> int:
    if extent <= floor:
        return extent
    return max(floor, extent // 2)


def layer_schedule(spec: ModelSpec) -> t.List[LayerSpec]:
    """
    Derive per-layer extents: channels follow the scaled schedule, and H, W
    halve in every layer whose channel count grows over its predecessor's
    (subject to the `min_spatial` floor). The first layer never resizes.
    """
    c, h, w = spec.input_shape
    channels = spec.scaled_channels()
    out = []

    for i, c_out in enumerate(channels):
        h_out, w_out = h, w
        if i > 0 and c_out > channels[i - 1]:
            h_out, w_out = _halve(h, spec.min_spatial), _halve(w, spec.min_spatial)

        out.append(LayerSpec(
            variant=spec.variant,
            c_in=c, c_out=c_out,
            h_in=h, h_out=h_out,
            w_in=w, w_out=w_out,
            expansion=spec.expansion,
            mix_expansion=spec.mix_expansion,
        ))
        c, h, w = c_out, h_out, w_out

    return out


class Model:
    """
    Parameter enumeration order: layers in depth order (each in its own
    documented order), then the classifier weight and bias.
    """

    def __init__(self, spec: ModelSpec, layers: t.List[XLayer],
                 classifier: T.DenseWeight, bias: Param):
        self.spec = spec
        self.layers = layers
        self.classifier = classifier
        self.bias = bias
        self.mode = Mode.train
        self._pool_in: t.Optional[np.ndarray] = None
        self._pooled: t.Optional[np.ndarray] = None

    @property
    def dtype(self):
        return self.classifier.value.dtype

    def train(self) -> 'Model':
        self.mode = Mode.train
        return self

    def eval(self) -> 'Model':
        self.mode = Mode.eval
        return self

    def params(self) -> t.List[Param]:
        out = [p for layer in self.layers for p in layer.params()]
        return out + [self.classifier, self.bias]

    def buffers(self) -> t.List[t.Tuple[str, np.ndarray]]:
        return [buf for layer in self.layers for buf in layer.buffers()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x: T.Tensor4) -> np.ndarray:
        """Return (N, num_classes) logits."""
        x = T.as_tensor4(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(
                f"model expects (N, {', '.join(map(str, self.spec.input_shape))}) "
                f"input, got {x.shape}")

        for layer in self.layers:
            x = layer.forward(x, self.mode)

        pooled = T.global_average_pool(x)
        self._pool_in = x
        self._pooled = pooled
        # One (1, C) row per sample, for the same reason as the axis maps.
        logits = T.matmul(pooled[:, None, :], self.classifier.value)[:, 0, :]
        return logits + self.bias.value

    def backward(self, grad_logits: np.ndarray) -> T.Tensor4:
        """Accumulate parameter gradients; return dL/dx."""
        if self._pooled is None or self._pool_in is None:
            raise UsageError("model backward called without a forward pass")
        if self.mode is not Mode.train:
            raise UsageError("backward requires a train-mode forward")

        self.classifier.grad += T.matmul(self._pooled.T, grad_logits)
        self.bias.grad += grad_logits.sum(axis=0)
        grad_pooled = T.matmul(grad_logits, self.classifier.value.T)
        grad = T.global_average_pool_backward(grad_pooled, self._pool_in.shape)

        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x: T.Tensor4) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)


def build_model(spec: ModelSpec, seed: int = 0, dtype=T.DTYPE) -> Model:
    rng = np.random.default_rng(seed)
    layers = [
        build_layer(
            lspec, rng,
            name=f"layers.{i}",
            dtype=dtype,
            bn_momentum=spec.bn_momentum,
            bn_eps=spec.bn_eps,
            prelu_init=spec.prelu_init,
        )
        for i, lspec in enumerate(layer_schedule(spec))
    ]
    c_final = layers[-1].spec.c_out
    classifier = T.DenseWeight.create(
        "classifier.weight", c_final, spec.num_classes, dtype)
    T.xavier_init(classifier, rng)
    bias = Param(
        "classifier.bias", np.zeros(spec.num_classes, dtype=dtype), decay=False)

    model = Model(spec, layers, classifier, bias)
    logger.debug(
        "built %s model: %d layers, %d parameters",
        spec.variant.value, len(layers), model.param_count())
    return model

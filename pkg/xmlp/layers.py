"""
X-MLP layers: a width-cross map, a height-cross map and a channel-cross MLP,
tied together with batch norm, PReLU and shape-conditional residuals.

Four variants share the same skeleton:

    Xn = BN(X)
    V  = spatial(Xn)                     # width map, then height map
    O  = BN(Xn + BN(V))                  # Xn only when H, W are preserved
    Y  = BN(σ(W4 · BN(σ(W3 · O)))) + O   # + O only when C is preserved

- basic: spatial is one dense map per axis.
- expansion: each axis gets two dense maps with a PReLU between them and a
  hidden extent of expansion * output extent.
- alternate: the four dense maps of `expansion` interleaved as width,
  height, width, height, each followed by a PReLU.
- superior: basic plus shortcuts from Xn and the post-width intermediate U
  into the mix, and an extra channel MLP (with its own residual) between
  the mix and the main channel block.
"""
import abc
import typing as t

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt

from . import tensor as T
from .config import Variant
from .errors import ShapeError, UsageError
from .tensor import Axis, Mode, Param

Buffers = t.List[t.Tuple[str, np.ndarray]]


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variant: Variant = Variant.basic
    c_in: PositiveInt
    c_out: PositiveInt
    h_in: PositiveInt
    h_out: PositiveInt
    w_in: PositiveInt
    w_out: PositiveInt
    expansion: PositiveInt = 4
    mix_expansion: t.Optional[PositiveInt] = None

    @property
    def spatial_residual(self) -> bool:
        return self.h_in == self.h_out and self.w_in == self.w_out

    @property
    def channel_residual(self) -> bool:
        return self.c_in == self.c_out

    @property
    def mix_hidden_mult(self) -> int:
        return self.mix_expansion or self.expansion

    @property
    def out_shape(self) -> t.Tuple[int, int, int]:
        return (self.c_out, self.h_out, self.w_out)

    @property
    def in_shape(self) -> t.Tuple[int, int, int]:
        return (self.c_in, self.h_in, self.w_in)


class Block(abc.ABC):
    """A differentiable unit that caches what its backward pass needs."""

    @abc.abstractmethod
    def forward(self, x: T.Tensor4, mode: Mode) -> T.Tensor4:
        pass

    @abc.abstractmethod
    def backward(self, grad: T.Tensor4) -> T.Tensor4:
        pass

    def params(self) -> t.List[Param]:
        return []

    def buffers(self) -> Buffers:
        return []


class AxisLinear(Block):
    def __init__(self, name: str, axis: Axis, rows: int, cols: int, dtype=T.DTYPE):
        self.axis = axis
        self.weight = T.DenseWeight.create(name, rows, cols, dtype)
        self._x: t.Optional[T.Tensor4] = None

    def forward(self, x, mode):
        self._x = x
        return T.linear_along_axis(x, self.weight, self.axis)

    def backward(self, grad):
        if self._x is None:
            raise UsageError(f"{self.weight.name}: backward before forward")
        return T.linear_along_axis_backward(grad, self._x, self.weight, self.axis)

    def params(self):
        return [self.weight]


class BatchNorm(Block):
    def __init__(self, name: str, features: int, dtype=T.DTYPE,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.state = T.BatchNormState.create(
            name, features, dtype=dtype, momentum=momentum, eps=eps)

    def forward(self, x, mode):
        return T.batchnorm_forward(x, self.state, mode)

    def backward(self, grad):
        return T.batchnorm_backward(grad, self.state)

    def params(self):
        return self.state.params()

    def buffers(self):
        return self.state.buffers()


class PRelu(Block):
    def __init__(self, name: str, init: float = 0.25, dtype=T.DTYPE):
        self.state = T.PReluState.create(name, init, dtype)
        self._x: t.Optional[T.Tensor4] = None

    def forward(self, x, mode):
        self._x = x
        return T.prelu_forward(x, self.state)

    def backward(self, grad):
        if self._x is None:
            raise UsageError(f"{self.state.slope.name}: backward before forward")
        return T.prelu_backward(grad, self._x, self.state)

    def params(self):
        return [self.state.slope]


class Chain(Block):
    def __init__(self, blocks: t.Sequence[Block]):
        self.blocks = list(blocks)

    def forward(self, x, mode):
        for b in self.blocks:
            x = b.forward(x, mode)
        return x

    def backward(self, grad):
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return grad

    def params(self):
        return [p for b in self.blocks for p in b.params()]

    def buffers(self):
        return [buf for b in self.blocks for buf in b.buffers()]


class _Factory:
    """Names and dtypes the blocks of one layer."""

    def __init__(self, prefix: str, dtype, bn_momentum: float, bn_eps: float,
                 prelu_init: float):
        self.prefix = prefix
        self.dtype = dtype
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.prelu_init = prelu_init

    def _n(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def linear(self, name, axis, rows, cols) -> AxisLinear:
        return AxisLinear(self._n(name), axis, rows, cols, self.dtype)

    def bn(self, name, features) -> BatchNorm:
        return BatchNorm(self._n(name), features, self.dtype,
                         momentum=self.bn_momentum, eps=self.bn_eps)

    def prelu(self, name) -> PRelu:
        return PRelu(self._n(name), self.prelu_init, self.dtype)

    def channel_mlp(self, name: str, c_in: int, c_out: int, mult: int) -> Chain:
        hidden = mult * c_out
        return Chain([
            self.linear(f"{name}.fc1", Axis.channel, c_in, hidden),
            self.prelu(f"{name}.act1"),
            self.bn(f"{name}.bn1", hidden),
            self.linear(f"{name}.fc2", Axis.channel, hidden, c_out),
            self.prelu(f"{name}.act2"),
            self.bn(f"{name}.bn2", c_out),
        ])


class XLayer(abc.ABC):
    """
    Shared wiring of the basic, expansion and alternate layers; subclasses
    only decide what `spatial` is.

    Parameter order: bn_in, spatial maps (application order), bn_v, bn_o,
    then the channel block.
    """
    variant: Variant

    def __init__(self, spec: LayerSpec, f: _Factory):
        self.spec = spec
        self.name = f.prefix
        self.bn_in = f.bn("bn_in", spec.c_in)
        self.spatial = self._build_spatial(spec, f)
        self.bn_v = f.bn("bn_v", spec.c_in)
        self.bn_o = f.bn("bn_o", spec.c_in)
        self.channel = f.channel_mlp("channel", spec.c_in, spec.c_out, spec.expansion)
        self._in_shape: t.Optional[t.Tuple[int, ...]] = None

    @abc.abstractmethod
    def _build_spatial(self, spec: LayerSpec, f: _Factory) -> Chain:
        pass

    def _blocks(self) -> t.List[Block]:
        return [self.bn_in, self.spatial, self.bn_v, self.bn_o, self.channel]

    def params(self) -> t.List[Param]:
        return [p for b in self._blocks() for p in b.params()]

    def buffers(self) -> Buffers:
        return [buf for b in self._blocks() for buf in b.buffers()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def _check_input(self, x: T.Tensor4):
        if tuple(x.shape[1:]) != self.spec.in_shape:
            raise ShapeError(
                f"{self.name or 'layer'}: expected "
                f"(N, {', '.join(map(str, self.spec.in_shape))})"
                f" input, got {x.shape}")

    def forward(self, x: T.Tensor4, mode: Mode = Mode.train) -> T.Tensor4:
        self._check_input(x)
        self._in_shape = x.shape
        xn = self.bn_in.forward(x, mode)
        vb = self.bn_v.forward(self.spatial.forward(xn, mode), mode)
        mix = vb + xn if self.spec.spatial_residual else vb
        o = self.bn_o.forward(mix, mode)
        y = self.channel.forward(o, mode)
        return y + o if self.spec.channel_residual else y

    def backward(self, grad: T.Tensor4) -> T.Tensor4:
        if self._in_shape is None:
            raise UsageError(f"{self.name or 'layer'}: backward before forward")
        g_o = self.channel.backward(grad)
        if self.spec.channel_residual:
            g_o = g_o + grad
        g_mix = self.bn_o.backward(g_o)
        g_xn = self.spatial.backward(self.bn_v.backward(g_mix))
        if self.spec.spatial_residual:
            g_xn = g_xn + g_mix
        return self.bn_in.backward(g_xn)

    def spatial_pair(self) -> t.Tuple[T.DenseWeight, T.DenseWeight]:
        """The (width, height) weights of a single linear spatial pair."""
        raise UsageError(
            f"{self.variant.value} layers have no single linear width/height pair")


class BasicLayer(XLayer):
    variant = Variant.basic

    def _build_spatial(self, spec, f):
        return Chain([
            f.linear("w1", Axis.width, spec.w_in, spec.w_out),
            f.linear("w2", Axis.height, spec.h_in, spec.h_out),
        ])

    def spatial_pair(self):
        w1, w2 = self.spatial.blocks
        assert isinstance(w1, AxisLinear) and isinstance(w2, AxisLinear)
        return w1.weight, w2.weight


class ExpansionLayer(XLayer):
    variant = Variant.expansion

    def _build_spatial(self, spec, f):
        e = spec.expansion
        return Chain([
            f.linear("w1a", Axis.width, spec.w_in, e * spec.w_out),
            f.prelu("act_w"),
            f.linear("w1b", Axis.width, e * spec.w_out, spec.w_out),
            f.linear("w2a", Axis.height, spec.h_in, e * spec.h_out),
            f.prelu("act_h"),
            f.linear("w2b", Axis.height, e * spec.h_out, spec.h_out),
        ])


class AlternateLayer(XLayer):
    variant = Variant.alternate

    def _build_spatial(self, spec, f):
        e = spec.expansion
        return Chain([
            f.linear("w1a", Axis.width, spec.w_in, e * spec.w_out),
            f.prelu("act1"),
            f.linear("w2a", Axis.height, spec.h_in, e * spec.h_out),
            f.prelu("act2"),
            f.linear("w1b", Axis.width, e * spec.w_out, spec.w_out),
            f.prelu("act3"),
            f.linear("w2b", Axis.height, e * spec.h_out, spec.h_out),
            f.prelu("act4"),
        ])


class SuperiorLayer(XLayer):
    """
    mix = BN(V) + Xn + U, each shortcut added only where its extents match
    the output of the height map; O = BN(mix); O' = O + mixer(O); the main
    channel block then runs on O'.

    Parameter order: bn_in, w1, w2, bn_v, bn_o, mixer, channel.
    """
    variant = Variant.superior

    def __init__(self, spec: LayerSpec, f: _Factory):
        super().__init__(spec, f)
        self.mixer = f.channel_mlp("mixer", spec.c_in, spec.c_in, spec.mix_hidden_mult)

    def _build_spatial(self, spec, f):
        return Chain([
            f.linear("w1", Axis.width, spec.w_in, spec.w_out),
            f.linear("w2", Axis.height, spec.h_in, spec.h_out),
        ])

    def _blocks(self):
        return [
            self.bn_in, self.spatial, self.bn_v, self.bn_o, self.mixer, self.channel]

    @property
    def width_shortcut(self) -> bool:
        # U is (C, H_in, W_out); it lines up with V when H is preserved.
        return self.spec.h_in == self.spec.h_out

    def forward(self, x, mode=Mode.train):
        self._check_input(x)
        self._in_shape = x.shape
        width, height = self.spatial.blocks
        xn = self.bn_in.forward(x, mode)
        u = width.forward(xn, mode)
        mix = self.bn_v.forward(height.forward(u, mode), mode)
        if self.spec.spatial_residual:
            mix = mix + xn
        if self.width_shortcut:
            mix = mix + u
        o = self.bn_o.forward(mix, mode)
        o = o + self.mixer.forward(o, mode)
        y = self.channel.forward(o, mode)
        return y + o if self.spec.channel_residual else y

    def backward(self, grad):
        if self._in_shape is None:
            raise UsageError(f"{self.name or 'layer'}: backward before forward")
        width, height = self.spatial.blocks
        g_o = self.channel.backward(grad)
        if self.spec.channel_residual:
            g_o = g_o + grad
        g_o = g_o + self.mixer.backward(g_o)
        g_mix = self.bn_o.backward(g_o)
        g_u = height.backward(self.bn_v.backward(g_mix))
        if self.width_shortcut:
            g_u = g_u + g_mix
        g_xn = width.backward(g_u)
        if self.spec.spatial_residual:
            g_xn = g_xn + g_mix
        return self.bn_in.backward(g_xn)

    def spatial_pair(self):
        w1, w2 = self.spatial.blocks
        assert isinstance(w1, AxisLinear) and isinstance(w2, AxisLinear)
        return w1.weight, w2.weight


LAYER_CLASSES: t.Dict[Variant, t.Type[XLayer]] = {
    Variant.basic: BasicLayer,
    Variant.expansion: ExpansionLayer,
    Variant.alternate: AlternateLayer,
    Variant.superior: SuperiorLayer,
}


def build_layer(
    spec: LayerSpec,
    rng: np.random.Generator,
    *,
    name: str = "",
    dtype=T.DTYPE,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
    prelu_init: float = 0.25,
) -> XLayer:
    """Instantiate the variant's layer with Xavier-initialized dense weights."""
    f = _Factory(name, dtype, bn_momentum, bn_eps, prelu_init)
    layer = LAYER_CLASSES[Variant(spec.variant)](spec, f)
    for p in layer.params():
        if isinstance(p, T.DenseWeight):
            T.xavier_init(p, rng)
    return layer

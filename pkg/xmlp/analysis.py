"""
Closed-form parameter and multiply-accumulate accounting, restoration of
the composed width/height maps into a single spatial kernel, and kernel
grid images.

Weights are stored rows=input, cols=output, so a layer's width map w1 is
(W, W') and its height map w2 is (H, H'). The restored kernel is

    K[a, b, i, j] = w2[a, i] * w1[b, j]

and maps an input plane X (H, W) to Y[i, j] = sum_{a,b} K[a, b, i, j] X[a, b].
"""
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

from . import pnm
from .config import ModelSpec, Variant
from .errors import ConfigError, ShapeError, UsageError
from .layers import LayerSpec, XLayer
from .logging import get_logger
from .model import Model, layer_schedule

logger = get_logger()

DEFAULT_KERNEL = 3


def nominal_layer_params(h: int, w: int, c: int, h_out: t.Optional[int] = None,
                         w_out: t.Optional[int] = None,
                         c_out: t.Optional[int] = None) -> int:
    """H*H' + W*W' + C*C': one dense map per axis, no expansion or BN."""
    return h * (h_out or h) + w * (w_out or w) + c * (c_out or c)


def conv_params(c: int, c_out: int, kernel: int = DEFAULT_KERNEL) -> int:
    return kernel * kernel * c * c_out


def full_fc_spatial_params(h: int, w: int, h_out: t.Optional[int] = None,
                           w_out: t.Optional[int] = None) -> int:
    return (h * w) * ((h_out or h) * (w_out or w))


def nominal_layer_macs(h: int, w: int, c: int) -> int:
    return h * w * c * (h + w + c)


def nominal_channel_macs(h: int, w: int, c: int) -> int:
    """`nominal_layer_macs` without the spatial H*W*C*(H + W) term."""
    return h * w * c * c


def conv_macs(h: int, w: int, c: int, kernel: int = DEFAULT_KERNEL,
              c_out: t.Optional[int] = None) -> int:
    return h * w * c * (c_out or c) * kernel * kernel


def full_fc_spatial_macs(h: int, w: int, c: int) -> int:
    return (h * w) ** 2 * c


def _channel_mlp_params(c_in: int, c_out: int, mult: int) -> t.Tuple[int, int, int]:
    """(dense, bn, prelu) scalars of fc1 -> prelu -> bn -> fc2 -> prelu -> bn."""
    hidden = mult * c_out
    return c_in * hidden + hidden * c_out, 2 * hidden + 2 * c_out, 2


def _spatial_params(s: LayerSpec) -> t.Tuple[int, int]:
    """(dense, prelu) scalars of the spatial maps."""
    if s.variant in (Variant.basic, Variant.superior):
        return s.w_in * s.w_out + s.h_in * s.h_out, 0
    e = s.expansion
    dense = (s.w_in * e * s.w_out + e * s.w_out * s.w_out
             + s.h_in * e * s.h_out + e * s.h_out * s.h_out)
    return dense, 2 if s.variant is Variant.expansion else 4


def _exact_macs(s: LayerSpec) -> int:
    """Per-sample MACs of every dense map in the implemented layer."""
    c, e = s.c_in, s.expansion
    if s.variant in (Variant.basic, Variant.superior):
        spatial = c * s.h_in * s.w_in * s.w_out + c * s.w_out * s.h_in * s.h_out
    elif s.variant is Variant.expansion:
        ew, eh = e * s.w_out, e * s.h_out
        spatial = (c * s.h_in * (s.w_in * ew + ew * s.w_out)
                   + c * s.w_out * (s.h_in * eh + eh * s.h_out))
    else:
        ew, eh = e * s.w_out, e * s.h_out
        spatial = (c * s.h_in * s.w_in * ew        # width, expand
                   + c * ew * s.h_in * eh          # height, expand
                   + c * eh * ew * s.w_out         # width, contract
                   + c * s.w_out * eh * s.h_out)   # height, contract

    pixels = s.h_out * s.w_out
    dense, _, _ = _channel_mlp_params(c, s.c_out, e)
    total = spatial + pixels * dense
    if s.variant is Variant.superior:
        mixer, _, _ = _channel_mlp_params(c, c, s.mix_hidden_mult)
        total += pixels * mixer
    return total


@dataclass
class LayerCost:
    index: int
    spec: LayerSpec
    spatial: int
    channel: int
    mixer: int
    bn: int
    prelu: int
    macs: int
    kernel: int = DEFAULT_KERNEL

    @property
    def params(self) -> int:
        return self.spatial + self.channel + self.mixer + self.bn + self.prelu

    @property
    def nominal_params(self) -> int:
        s = self.spec
        return nominal_layer_params(s.h_in, s.w_in, s.c_in, s.h_out, s.w_out, s.c_out)

    @property
    def conv_params(self) -> int:
        return conv_params(self.spec.c_in, self.spec.c_out, self.kernel)

    @property
    def fc_spatial_params(self) -> int:
        s = self.spec
        return full_fc_spatial_params(s.h_in, s.w_in, s.h_out, s.w_out)

    @property
    def nominal_macs(self) -> int:
        return nominal_layer_macs(self.spec.h_in, self.spec.w_in, self.spec.c_in)

    @property
    def nominal_channel_macs(self) -> int:
        return nominal_channel_macs(self.spec.h_in, self.spec.w_in, self.spec.c_in)

    @property
    def conv_macs(self) -> int:
        s = self.spec
        return conv_macs(s.h_out, s.w_out, s.c_in, self.kernel, s.c_out)

    @property
    def fc_spatial_macs(self) -> int:
        s = self.spec
        return (s.h_in * s.w_in) * (s.h_out * s.w_out) * s.c_in


@dataclass
class CostReport:
    layers: t.List[LayerCost]
    classifier_params: int = 0
    classifier_macs: int = 0
    kernel: int = DEFAULT_KERNEL
    variant: str = ""
    input_shape: t.Tuple[int, ...] = field(default_factory=tuple)

    def _sum(self, attr: str) -> int:
        return sum(getattr(lc, attr) for lc in self.layers)

    @property
    def total_params(self) -> int:
        return self._sum("params") + self.classifier_params

    @property
    def total_macs(self) -> int:
        return self._sum("macs") + self.classifier_macs

    def totals(self) -> t.Dict[str, int]:
        out = {
            attr: self._sum(attr) for attr in (
                "spatial", "channel", "mixer", "bn", "prelu", "nominal_params",
                "conv_params", "fc_spatial_params", "nominal_macs",
                "nominal_channel_macs", "conv_macs", "fc_spatial_macs")
        }
        out["classifier"] = self.classifier_params
        out["params"] = self.total_params
        out["macs"] = self.total_macs
        return out


def layer_cost(spec: LayerSpec, index: int = 1,
               kernel: int = DEFAULT_KERNEL) -> LayerCost:
    spatial, spatial_prelu = _spatial_params(spec)
    channel, channel_bn, channel_prelu = _channel_mlp_params(
        spec.c_in, spec.c_out, spec.expansion)
    mixer = mixer_bn = mixer_prelu = 0
    if spec.variant is Variant.superior:
        mixer, mixer_bn, mixer_prelu = _channel_mlp_params(
            spec.c_in, spec.c_in, spec.mix_hidden_mult)

    return LayerCost(
        index=index,
        spec=spec,
        spatial=spatial,
        channel=channel,
        mixer=mixer,
        # bn_in, bn_v and bn_o, then the MLP blocks' own.
        bn=3 * 2 * spec.c_in + channel_bn + mixer_bn,
        prelu=spatial_prelu + channel_prelu + mixer_prelu,
        macs=_exact_macs(spec),
        kernel=kernel,
    )


def cost_report(spec: t.Union[LayerSpec, ModelSpec],
                kernel: int = DEFAULT_KERNEL) -> CostReport:
    if isinstance(spec, LayerSpec):
        return CostReport(
            [layer_cost(spec, 1, kernel)], kernel=kernel,
            variant=spec.variant.value, input_shape=spec.in_shape)

    layers = [layer_cost(s, i, kernel) for i, s in enumerate(layer_schedule(spec), 1)]
    c_final = layers[-1].spec.c_out
    return CostReport(
        layers,
        classifier_params=c_final * spec.num_classes + spec.num_classes,
        classifier_macs=c_final * spec.num_classes,
        kernel=kernel,
        variant=spec.variant.value,
        input_shape=tuple(spec.input_shape),
    )


def analytic_param_count(spec: t.Union[LayerSpec, ModelSpec],
                         kernel: int = DEFAULT_KERNEL) -> CostReport:
    """Itemized parameter counts with convolution and full-FC comparisons."""
    return cost_report(spec, kernel)


def analytic_flop_count(spec: t.Union[LayerSpec, ModelSpec],
                        kernel: int = DEFAULT_KERNEL) -> CostReport:
    """Per-sample MACs, simplified and exact, with the comparison columns."""
    return cost_report(spec, kernel)


@dataclass
class RestoredKernel:
    # 1-based; 0 when not taken from a model.
    layer: int
    # (H, W, H', W'), or (C, H, W, H', W') when per-channel scales were folded in.
    kernel: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    @property
    def per_channel(self) -> bool:
        return self.kernel.ndim == 5


def restore_spatial_weights(
    w1: np.ndarray,
    w2: np.ndarray,
    channel_scale: t.Optional[np.ndarray] = None,
    layer: int = 0,
) -> RestoredKernel:
    """
    Compose a (W, W') width map and an (H, H') height map into one
    (H, W, H', W') kernel. With `channel_scale`, a leading channel axis
    carries each channel's scale folded into its own copy of the kernel.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.ndim != 2 or w2.ndim != 2:
        raise ShapeError("width and height maps must be matrices")

    kernel = np.einsum("ai,bj->abij", w2, w1)
    if channel_scale is not None:
        scale = np.asarray(channel_scale, dtype=np.float64).reshape(-1)
        kernel = scale[:, None, None, None, None] * kernel[None]
    return RestoredKernel(layer, kernel, w1, w2)


def apply_restored_kernel(k: RestoredKernel, x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C, H', W') through the restored kernel."""
    if k.per_channel:
        return np.einsum("ncab,cabij->ncij", x, k.kernel)
    return np.einsum("ncab,abij->ncij", x, k.kernel)


def bn_channel_scale(layer: XLayer) -> np.ndarray:
    """Eval-mode gamma / sqrt(var + eps) of bn_in times that of bn_v."""
    scale = np.ones(layer.spec.c_in)
    for bn in (layer.bn_in.state, layer.bn_v.state):
        scale = scale * bn.gamma.value.astype(np.float64) / np.sqrt(
            bn.running_var.astype(np.float64) + bn.eps)
    return scale


def layer_kernel(model: Model, index: int, fold_bn: bool = False) -> RestoredKernel:
    """Restore the spatial kernel of the 1-based `index`th layer."""
    if not 1 <= index <= len(model.layers):
        raise ConfigError(f"layer {index} out of range 1..{len(model.layers)}")
    layer = model.layers[index - 1]
    w1, w2 = layer.spatial_pair()
    scale = bn_channel_scale(layer) if fold_bn else None
    return restore_spatial_weights(w1.value, w2.value, scale, layer=index)


MID_GRAY = 128


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    """Min-max map a tile onto 0..255; a constant tile becomes mid-gray."""
    tile = np.asarray(tile, dtype=np.float64)
    lo, hi = tile.min(), tile.max()
    if not hi > lo:
        return np.full(tile.shape, MID_GRAY, dtype=np.uint8)
    return np.floor((tile - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def kernel_grid(kernel: np.ndarray, crop: t.Tuple[int, int]) -> np.ndarray:
    """
    Tile the (H, W) input-weight maps of the central rows x cols output
    positions of an (H, W, H', W') kernel, with 1-pixel black separators.
    The image is rows*(H+1)+1 by cols*(W+1)+1.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"expected an (H, W, H', W') kernel, got {kernel.shape}")
    h, w, h_out, w_out = kernel.shape
    rows, cols = crop
    if not (1 <= rows <= h_out and 1 <= cols <= w_out):
        raise ConfigError(
            f"crop {rows}x{cols} doesn't fit {h_out}x{w_out} output positions")

    top, left = (h_out - rows) // 2, (w_out - cols) // 2
    img = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            y, x = 1 + r * (h + 1), 1 + c * (w + 1)
            img[y:y + h, x:x + w] = normalize_tile(kernel[:, :, top + r, left + c])
    return img


def colorize(gray: np.ndarray, cmap: str) -> np.ndarray:
    """Map a graymap through a matplotlib colormap; separators stay black."""
    try:
        colormap = matplotlib.colormaps[cmap]
    except KeyError:
        raise ConfigError(f"unknown colormap {cmap!r}") from None
    rgb = colormap(gray / 255.0)[..., :3]
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def export_kernel_grid(
    k: RestoredKernel,
    center_crop: t.Tuple[int, int],
    path: Path,
    cmap: t.Optional[str] = None,
    channel: t.Optional[int] = None,
) -> Path:
    """Write a kernel grid as a P5 graymap, or as a P6 pixmap through `cmap`."""
    kernel = k.kernel
    if k.per_channel:
        if channel is None:
            raise UsageError("a per-channel kernel needs a channel to export")
        kernel = kernel[channel]

    gray = kernel_grid(kernel, center_crop)
    if cmap:
        img = colorize(gray, cmap)
        img[gray_separators(gray.shape, kernel.shape[:2])] = 0
    else:
        img = gray
    path = pnm.write_pnm(Path(path), img)
    logger.debug("wrote %dx%d kernel grid %s", img.shape[1], img.shape[0], path)
    return path


def gray_separators(shape: t.Tuple[int, int], tile: t.Tuple[int, int]) -> np.ndarray:
    """Boolean mask of the separator pixels of a kernel grid."""
    h, w = tile
    mask = np.zeros(shape, dtype=bool)
    mask[::h + 1, :] = True
    mask[:, ::w + 1] = True
    return mask

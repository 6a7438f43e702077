import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from . import analysis, pnm
from . import tensor as T
from .config import ModelSpec, Variant
from .errors import ConfigError, UsageError
from .layers import LayerSpec
from .model import build_model
from .tensor import Axis


def test_parameter_formulas():
    spatial = 2 * 32 * 32
    assert analysis.nominal_layer_params(32, 32, 64) - 64 * 64 == spatial == 2048
    assert analysis.conv_params(64, 64) == 36864
    assert analysis.conv_params(64, 64, kernel=5) == 25 * 64 * 64


def test_full_fc_ratio():
    for h in (4, 8, 16, 32):
        fc = analysis.full_fc_spatial_params(h, h)
        xmlp = 2 * h * h
        assert fc == h ** 4
        assert fc / xmlp == h * h / 2
    assert analysis.full_fc_spatial_params(8, 8) == 4096


def test_parameter_threshold_grid():
    for k in (1, 3, 5, 7):
        for h in range(1, 65, 3):
            for c in range(1, 257, 5):
                smaller = analysis.nominal_layer_params(h, h, c) < analysis.conv_params(
                    c, c, k)
                assert smaller == (h / c < math.sqrt((k * k - 1) / 2)), (h, c, k)


def test_mac_formulas():
    assert analysis.conv_macs(16, 16, 64) == 9_437_184
    assert analysis.nominal_layer_macs(16, 16, 64) == 1_572_864
    assert analysis.nominal_layer_macs(1, 1, 7) == 7 * (2 + 7)
    for h in (2, 8, 32):
        ratio = analysis.nominal_channel_macs(h, h, h) / analysis.conv_macs(h, h, h)
        assert ratio == pytest.approx(1 / 9)
    assert analysis.full_fc_spatial_macs(4, 4, 3) == 16 * 16 * 3


def test_layer_cost_columns():
    spec = LayerSpec(c_in=64, c_out=64, h_in=32, h_out=32, w_in=32, w_out=32)
    lc = analysis.layer_cost(spec)
    assert lc.spatial == 2048
    assert lc.conv_params == 36864
    assert lc.nominal_params == 2048 + 64 * 64
    assert lc.fc_spatial_params == 32 ** 4
    assert lc.channel == 2 * 64 * 256
    assert lc.mixer == 0


def test_report_totals_and_gmacs():
    spec = ModelSpec(width_mult=0.25, input_shape=(1, 32, 32))
    report = analysis.analytic_flop_count(spec)
    assert len(report.layers) == 13
    assert report.total_macs == sum(lc.macs for lc in report.layers) + 128 * 10
    assert report.totals()["macs"] == report.total_macs
    single = analysis.cost_report(report.layers[0].spec)
    assert single.total_params == report.layers[0].params
    assert single.classifier_params == 0


@pytest.mark.parametrize("variant", list(Variant))
def test_exact_macs_match_kernel_calls(monkeypatch, variant):
    spec = ModelSpec(variant=variant, input_shape=(2, 8, 8), num_classes=3,
                     channels=[2, 4, 4], expansion=2, min_spatial=2,
                     enforce_depth=False)
    model = build_model(spec)
    counted = []
    real = T.matmul

    def counting(a, b):
        counted.append(int(np.prod(a.shape)) * b.shape[-1])
        return real(a, b)

    monkeypatch.setattr(T, "matmul", counting)
    model.eval().forward(np.zeros((1, 2, 8, 8)))
    assert sum(counted) == analysis.analytic_flop_count(spec).total_macs


def test_restored_kernel_identity():
    k = analysis.restore_spatial_weights(np.eye(3), np.eye(4)).kernel
    assert k.shape == (4, 3, 4, 3)
    for a, b, i, j in np.ndindex(*k.shape):
        assert k[a, b, i, j] == (1.0 if (a, b) == (i, j) else 0.0)


def test_restored_kernel_entries():
    rng = np.random.default_rng(0)
    w1 = rng.standard_normal((5, 3))
    w2 = rng.standard_normal((4, 2))
    k = analysis.restore_spatial_weights(w1, w2).kernel
    assert k.shape == (4, 5, 2, 3)
    for a, b, i, j in np.ndindex(*k.shape):
        assert k[a, b, i, j] == w2[a, i] * w1[b, j]


def _sequential(x, w1, w2):
    dw1 = T.DenseWeight.create("w1", *w1.shape, dtype=np.float64)
    dw2 = T.DenseWeight.create("w2", *w2.shape, dtype=np.float64)
    dw1.value[...] = w1
    dw2.value[...] = w2
    return T.linear_along_axis(T.linear_along_axis(x, dw1, Axis.width), dw2,
                               Axis.height)


def test_restored_kernel_matches_sequential_application():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w, h_out, w_out = (int(v) for v in rng.integers(1, 17, size=4))
        w1 = rng.standard_normal((w, w_out))
        w2 = rng.standard_normal((h, h_out))
        x = rng.standard_normal((2, 3, h, w))
        k = analysis.restore_spatial_weights(w1, w2)
        assert_allclose(analysis.apply_restored_kernel(k, x), _sequential(x, w1, w2),
                        atol=1e-5)


def test_folded_kernel_scales_each_channel():
    rng = np.random.default_rng(2)
    w1, w2 = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    scale = np.array([1.0, -2.0, 0.5])
    k = analysis.restore_spatial_weights(w1, w2, channel_scale=scale)
    assert k.per_channel
    assert k.kernel.shape == (3, 4, 4, 4, 4)
    x = rng.standard_normal((2, 3, 4, 4))
    assert_allclose(analysis.apply_restored_kernel(k, x),
                    _sequential(x, w1, w2) * scale[None, :, None, None], atol=1e-10)


def test_layer_kernel_from_model():
    model = build_model(ModelSpec(width_mult=0.125, input_shape=(1, 32, 32)))
    model.eval()
    k = analysis.layer_kernel(model, 3)
    assert k.layer == 3
    assert k.kernel.shape == (32, 32, 16, 16)
    folded = analysis.layer_kernel(model, 3, fold_bn=True)
    assert folded.kernel.shape == (8, 32, 32, 16, 16)
    # Fresh BN: gamma 1, running var 1, so the scale is 1 / (1 + eps).
    assert_allclose(folded.kernel[0], k.kernel / (1 + 1e-5), rtol=1e-6)
    with pytest.raises(ConfigError):
        analysis.layer_kernel(model, 14)

    alt = build_model(ModelSpec(variant=Variant.alternate, width_mult=0.125,
                                input_shape=(1, 32, 32)))
    with pytest.raises(UsageError):
        analysis.layer_kernel(alt, 1)


def test_normalize_tile():
    assert_array_equal(analysis.normalize_tile(np.full((2, 2), 3.0)), 128)
    assert_array_equal(analysis.normalize_tile(np.array([[1.0, 3.0], [3.0, 9.0]])),
                       [[0, 64], [64, 255]])


def test_kernel_grid_layout():
    k = analysis.restore_spatial_weights(np.eye(8), np.eye(6)).kernel
    grid = analysis.kernel_grid(k, (3, 4))
    assert grid.shape == (3 * 7 + 1, 4 * 9 + 1)
    assert_array_equal(grid[::7, :], 0)
    assert_array_equal(grid[:, ::9], 0)
    # Identity: each tile is a single white pixel at its output position.
    assert (grid == 255).sum() == 12
    top, left = (6 - 3) // 2, (8 - 4) // 2
    assert grid[1 + top, 1 + left] == 255

    with pytest.raises(ConfigError):
        analysis.kernel_grid(k, (7, 1))


def test_kernel_grid_constant_is_mid_gray():
    grid = analysis.kernel_grid(np.ones((2, 3, 2, 2)), (2, 2))
    tiles = ~analysis.gray_separators(grid.shape, (2, 3))
    assert_array_equal(grid[tiles], analysis.MID_GRAY)


def test_kernel_grid_golden(datadir, tmp_path):
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    k = analysis.restore_spatial_weights(w, w)
    path = analysis.export_kernel_grid(k, (2, 2), tmp_path / "grid.pgm")
    golden = datadir / "kernel_grid_2x2.pgm"
    assert path.read_bytes() == golden.read_bytes()
    assert pnm.read_pnm(golden).shape == (7, 7)


# Drawn once from a seeded integer generator; integer products keep the bytes exact.
SEEDED_W1 = [[-2, -9, -9, 6, -8, 9], [-6, 4, 4, 5, 6, -9], [-5, 6, 1, -5, 5, -4],
             [8, 4, -3, -6, -2, 3], [3, -6, -6, -2, 2, -9]]
SEEDED_W2 = [[4, 4, -6, 8, -9], [-9, 1, 3, 5, 1], [-7, 6, 4, -3, -8],
             [0, -7, -5, 1, -5]]


def test_kernel_grid_seeded_golden(datadir, tmp_path):
    k = analysis.restore_spatial_weights(SEEDED_W1, SEEDED_W2)
    assert k.kernel.shape == (4, 5, 5, 6)
    path = analysis.export_kernel_grid(k, (3, 4), tmp_path / "grid.pgm")
    golden = datadir / "kernel_grid_seeded.pgm"
    assert path.read_bytes() == golden.read_bytes()
    grid = pnm.read_pnm(golden)
    assert grid.shape == (3 * 5 + 1, 4 * 6 + 1)
    assert_array_equal(grid[::5, :], 0)
    assert_array_equal(grid[:, ::6], 0)


def test_colormap_export(tmp_path):
    rng = np.random.default_rng(3)
    k = analysis.restore_spatial_weights(rng.standard_normal((4, 4)),
                                         rng.standard_normal((4, 4)))
    path = analysis.export_kernel_grid(k, (2, 2), tmp_path / "grid.ppm", "viridis")
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n11 11\n255\n")
    img = pnm.read_pnm(path)
    assert img.shape == (11, 11, 3)
    assert_array_equal(img[0], 0)
    assert_array_equal(img[:, 5], 0)

    with pytest.raises(ConfigError):
        analysis.export_kernel_grid(k, (2, 2), tmp_path / "x.ppm", "no-such-map")


def test_per_channel_export_needs_channel(tmp_path):
    k = analysis.restore_spatial_weights(np.eye(2), np.eye(2), channel_scale=[1, 2])
    with pytest.raises(UsageError):
        analysis.export_kernel_grid(k, (1, 1), tmp_path / "x.pgm")
    path = analysis.export_kernel_grid(k, (1, 1), tmp_path / "x.pgm", channel=1)
    assert pnm.read_pnm(path).shape == (4, 4)

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from . import analysis
from .config import ModelSpec, Variant, VGG16_CHANNELS
from .errors import ShapeError, UsageError
from .model import build_model, layer_schedule

TINY = dict(input_shape=(2, 8, 8), num_classes=3, channels=[2, 4, 4],
            expansion=2, min_spatial=2, enforce_depth=False)


def test_default_schedule():
    sched = layer_schedule(ModelSpec())
    assert [s.c_out for s in sched] == VGG16_CHANNELS
    assert [s.h_out for s in sched] == [32, 32, 16, 16] + [8] * 9
    assert [s.w_out for s in sched] == [s.h_out for s in sched]
    assert sched[0].c_in == 3
    for prev, cur in zip(sched, sched[1:]):
        assert cur.in_shape == prev.out_shape


def test_width_multiplier_schedule():
    sched = layer_schedule(ModelSpec(width_mult=0.25, input_shape=(1, 32, 32)))
    assert [s.c_out for s in sched] == [16, 16, 32, 32, 64, 64, 64] + [128] * 6
    assert sched[0].c_in == 1


def test_spatial_floor():
    spec = ModelSpec(input_shape=(1, 12, 12), channels=[2, 4, 8, 16],
                     min_spatial=4, enforce_depth=False)
    assert [s.h_out for s in layer_schedule(spec)] == [12, 6, 4, 4]


def test_full_width_basic_param_count():
    spec = ModelSpec(variant=Variant.basic, input_shape=(3, 32, 32))
    report = analysis.analytic_param_count(spec)
    totals = report.totals()
    assert totals["channel"] == 13_779_712
    assert totals["spatial"] == 6_912
    assert totals["bn"] == 64_530
    assert totals["prelu"] == 26
    assert totals["classifier"] == 5_130
    assert report.total_params == 13_856_310
    assert build_model(spec).param_count() == 13_856_310


def test_full_width_grayscale_enumeration_matches_analytic():
    spec = ModelSpec(variant=Variant.basic, input_shape=(1, 32, 32))
    report = analysis.analytic_param_count(spec)
    assert build_model(spec).param_count() == report.total_params
    # Two fewer input channels: 2 * 256 first-layer fc1 weights and 2 * 6 BN scalars.
    assert report.total_params == 13_856_310 - 2 * 256 - 2 * 6


@pytest.mark.parametrize("variant", list(Variant))
def test_enumeration_matches_analytic_count(variant):
    for spec in (
        ModelSpec(variant=variant, width_mult=0.25, input_shape=(1, 32, 32)),
        ModelSpec(variant=variant, mix_expansion=1, **TINY),
    ):
        model = build_model(spec)
        assert model.param_count() == analysis.analytic_param_count(spec).total_params
        names = [p.name for p in model.params()]
        assert len(names) == len(set(names))
        assert names[-2:] == ["classifier.weight", "classifier.bias"]


def test_forward_shape_contract():
    spec = ModelSpec(width_mult=0.25, input_shape=(3, 32, 32))
    model = build_model(spec)
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32))
    logits = model.forward(x)
    assert logits.shape == (4, 10)
    assert logits.dtype == np.float32
    assert model.predict(x).shape == (4,)


def test_zero_classifier_gives_bias():
    model = build_model(ModelSpec(**TINY))
    model.classifier.value[...] = 0
    model.bias.value[...] = [1, -2, 3]
    x = np.random.default_rng(1).standard_normal((5, 2, 8, 8))
    assert_array_equal(model.forward(x), np.tile([1, -2, 3], (5, 1)))


@pytest.mark.parametrize("variant", list(Variant))
def test_eval_forward_is_batch_invariant(variant):
    model = build_model(ModelSpec(variant=variant, **TINY))
    rng = np.random.default_rng(2)
    model.forward(rng.standard_normal((8, 2, 8, 8)))
    model.eval()
    x = rng.standard_normal((7, 2, 8, 8)).astype(np.float32)
    batched = model.forward(x)
    assert batched.dtype == np.float32
    single = np.concatenate([model.forward(x[i:i + 1]) for i in range(7)])
    assert_array_equal(batched, single)


def test_quarter_width_predictions_do_not_depend_on_batch():
    model = build_model(ModelSpec(width_mult=0.25, input_shape=(1, 32, 32)), seed=1)
    rng = np.random.default_rng(3)
    model.forward(rng.standard_normal((4, 1, 32, 32)))
    model.eval()
    x = rng.standard_normal((8, 1, 32, 32)).astype(np.float32)
    batched = model.forward(x)
    for i in range(8):
        assert_array_equal(model.forward(x[i:i + 1])[0], batched[i])


def test_backward_zero_grad():
    model = build_model(ModelSpec(variant=Variant.superior, **TINY))
    logits = model.forward(np.ones((2, 2, 8, 8)))
    gx = model.backward(np.zeros_like(logits))
    assert gx.shape == (2, 2, 8, 8)
    for p in model.params():
        assert_array_equal(p.grad, 0, err_msg=p.name)


def test_seeded_build_is_deterministic():
    a = build_model(ModelSpec(**TINY), seed=3)
    b = build_model(ModelSpec(**TINY), seed=3)
    c = build_model(ModelSpec(**TINY), seed=4)
    for pa, pb in zip(a.params(), b.params()):
        assert_array_equal(pa.value, pb.value)
    assert not np.array_equal(a.classifier.value, c.classifier.value)


def test_model_usage_errors():
    model = build_model(ModelSpec(**TINY))
    with pytest.raises(UsageError):
        model.backward(np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 6, 6)))
    model.eval()
    logits = model.forward(np.zeros((1, 2, 8, 8)))
    with pytest.raises(UsageError):
        model.backward(np.zeros_like(logits))


def test_schedule_validation():
    with pytest.raises(ValidationError):
        ModelSpec(channels=[4, 8])
    with pytest.raises(ValidationError):
        ModelSpec(channels=[8, 4], enforce_depth=False)
    with pytest.raises(ValidationError):
        ModelSpec(channels=[])

"""
Finite-difference checks of every backward pass.

Each case builds the same tiny instance twice, in float32 and in float64,
with identical parameter values. The scalar objective is L = sum(out * R) for a
fixed random R. Central differences of L are always taken on the float64
copy; the float32 analytic gradient is compared against them with the
32-bit tolerance and the float64 analytic gradient with the 64-bit one.
The error is norm-wise: |a - n| / (|a| + |n|).
"""
import typing as t
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelSpec, Variant
from .layers import AxisLinear, BatchNorm, Block, LayerSpec, PRelu, build_layer
from .logging import get_logger
from .model import build_model
from .tensor import Axis, Mode, Param

logger = get_logger()

EPS = 1e-6
# Coordinates sampled per array; smaller arrays are checked exhaustively.
MAX_COORDS = 24
MAX_EXTENT = 6
BATCH = 3


class Instance(t.NamedTuple):
    x: np.ndarray
    forward: t.Callable[[np.ndarray], np.ndarray]
    backward: t.Callable[[np.ndarray], np.ndarray]
    params: t.List[Param]


Builder = t.Callable[[int, t.Any], Instance]


@dataclass
class CheckResult:
    case: str
    dtype: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < np.finfo(np.float64).tiny:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _block_instance(block: Block, x: np.ndarray) -> Instance:
    return Instance(
        x, lambda v: block.forward(v, Mode.train), block.backward, block.params())


class _Pool(Block):
    def forward(self, x, mode):
        self._shape = x.shape
        return T.global_average_pool(x)

    def backward(self, grad):
        return T.global_average_pool_backward(grad, self._shape)


class _CrossEntropy(Block):
    def __init__(self, labels: np.ndarray):
        self.labels = labels

    def forward(self, x, mode):
        loss, self._grad = T.softmax_cross_entropy(x, self.labels)
        return np.asarray(loss, dtype=x.dtype)

    def backward(self, grad):
        return self._grad * grad


def _x(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype)


def _linear(axis: Axis) -> Builder:
    def build(seed, dtype):
        rng = np.random.default_rng(seed)
        shape = tuple(int(v) for v in rng.integers(2, MAX_EXTENT + 1, size=4))
        rows = shape[T.AXIS_INDEX[axis]]
        cols = int(rng.integers(1, MAX_EXTENT + 1))
        block = AxisLinear(axis.value, axis, rows, cols, dtype)
        T.xavier_init(block.weight, rng)
        return _block_instance(block, _x(rng, shape, dtype))
    return build


def _batchnorm(seed, dtype):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(2, MAX_EXTENT + 1, size=4))
    block = BatchNorm("bn", shape[1], dtype)
    block.state.gamma.value[...] = rng.uniform(0.5, 1.5, shape[1])
    block.state.beta.value[...] = rng.uniform(-0.5, 0.5, shape[1])
    return _block_instance(block, _x(rng, shape, dtype))


def _prelu(seed, dtype):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(2, MAX_EXTENT + 1, size=4))
    return _block_instance(PRelu("act", 0.25, dtype), _x(rng, shape, dtype))


def _pool(seed, dtype):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, MAX_EXTENT + 1, size=4))
    return _block_instance(_Pool(), _x(rng, shape, dtype))


def _cross_entropy(seed, dtype):
    rng = np.random.default_rng(seed)
    n, k = (int(v) for v in rng.integers(2, MAX_EXTENT + 1, size=2))
    labels = rng.integers(0, k, size=n)
    return _block_instance(_CrossEntropy(labels), _x(rng, (n, k), dtype))


def random_layer_spec(variant: Variant, rng: np.random.Generator) -> LayerSpec:
    """A small spec; about half of them resize H/W or widen C."""
    c_in = int(rng.integers(1, 4))
    # Halved extents stay >= 2 so no BN sees a two-value batch.
    h_in, w_in = (int(v) for v in rng.integers(4, MAX_EXTENT + 1, size=2))
    return LayerSpec(
        variant=variant,
        c_in=c_in,
        c_out=c_in + int(rng.integers(0, 2)) * int(rng.integers(1, 3)),
        h_in=h_in,
        h_out=h_in if rng.random() < 0.5 else h_in // 2,
        w_in=w_in,
        w_out=w_in if rng.random() < 0.5 else w_in // 2,
        expansion=2,
    )


def _layer(variant: Variant) -> Builder:
    def build(seed, dtype):
        rng = np.random.default_rng(seed)
        spec = random_layer_spec(variant, rng)
        layer = build_layer(spec, rng, name=variant.value, dtype=dtype)
        x = _x(rng, (BATCH, *spec.in_shape), dtype)
        return Instance(
            x, lambda v: layer.forward(v, Mode.train), layer.backward, layer.params())
    return build


TINY_MODEL = dict(
    input_shape=(2, 6, 6), num_classes=3, channels=[2, 3, 3],
    expansion=2, min_spatial=2, enforce_depth=False)


def _model(seed, dtype):
    spec = ModelSpec(variant=list(Variant)[seed % len(Variant)], **TINY_MODEL)
    model = build_model(spec, seed=seed, dtype=dtype)
    x = _x(np.random.default_rng(seed), (BATCH, *spec.input_shape), dtype)
    return Instance(x, model.forward, model.backward, model.params())


CASES: t.Dict[str, Builder] = {
    "linear.width": _linear(Axis.width),
    "linear.height": _linear(Axis.height),
    "linear.channel": _linear(Axis.channel),
    "batchnorm": _batchnorm,
    "prelu": _prelu,
    "global_avg_pool": _pool,
    "softmax_cross_entropy": _cross_entropy,
    **{f"layer.{v.value}": _layer(v) for v in Variant},
    "model": _model,
}


def _analytic(inst: Instance, r: np.ndarray) -> t.List[np.ndarray]:
    for p in inst.params:
        p.zero_grad()
    out = inst.forward(inst.x)
    gx = inst.backward(r.astype(out.dtype))
    return [gx] + [p.grad.copy() for p in inst.params]


def _numeric(inst: Instance, r: np.ndarray,
             coords: t.List[np.ndarray]) -> t.List[np.ndarray]:
    def loss() -> float:
        return float(np.sum(inst.forward(inst.x).astype(np.float64) * r))

    out = []
    for arr, idx in zip([inst.x] + [p.value for p in inst.params], coords):
        flat = arr.reshape(-1)
        grads = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + EPS
            plus = loss()
            flat[i] = orig - EPS
            minus = loss()
            flat[i] = orig
            grads[k] = (plus - minus) / (2 * EPS)
        out.append(grads)
    return out


def check_case(name: str, build: Builder, seed: int,
               tol32: float = 1e-3, tol64: float = 1e-6) -> t.List[CheckResult]:
    p32 = build(seed, np.float32)
    p64 = build(seed, np.float64)
    # Evaluate both precisions at exactly the same point.
    p64.x[...] = p32.x
    for a, b in zip(p32.params, p64.params):
        b.value[...] = a.value

    rng = np.random.default_rng(seed + 1_000_003)
    out_shape = np.shape(p64.forward(p64.x))
    r = np.asarray(rng.standard_normal(out_shape))

    arrays = [p64.x] + [p.value for p in p64.params]
    coords = [
        np.arange(a.size) if a.size <= MAX_COORDS
        else np.sort(rng.choice(a.size, MAX_COORDS, replace=False))
        for a in arrays
    ]
    numeric = np.concatenate(_numeric(p64, r, coords))

    results = []
    for dtype, inst, tol in (("float32", p32, tol32), ("float64", p64, tol64)):
        grads = _analytic(inst, r)
        analytic = np.concatenate([g.reshape(-1)[idx] for g, idx in zip(grads, coords)])
        err = rel_error(analytic, numeric)
        results.append(CheckResult(name, dtype, seed, err, tol))
        logger.debug("gradcheck %s %s seed %d: %.3e", name, dtype, seed, err)
    return results


def run_suite(seeds: int = 5, tol32: float = 1e-3, tol64: float = 1e-6,
              cases: t.Optional[t.Sequence[str]] = None) -> t.List[CheckResult]:
    results = []
    for name in cases or list(CASES):
        for seed in range(seeds):
            results.extend(check_case(name, CASES[name], seed, tol32, tol64))
    return results


def summarize(
        results: t.Sequence[CheckResult]) -> t.List[t.Tuple[str, float, float, bool]]:
    """(case, max float32 error, max float64 error, passed) per case."""
    out = []
    for name in dict.fromkeys(r.case for r in results):
        rows = [r for r in results if r.case == name]
        worst = {
            dtype: max((r.error for r in rows if r.dtype == dtype), default=0.0)
            for dtype in ("float32", "float64")
        }
        passed = all(r.passed for r in rows)
        out.append((name, worst["float32"], worst["float64"], passed))
    return out

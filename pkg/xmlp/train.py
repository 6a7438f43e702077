"""
SGD with momentum, the plateau learning-rate schedule and the
train/evaluate loops.
"""
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import AugmentPolicy, TrainConfig
from .data import BatchLoader, Dataset, NormStats
from .errors import NumericError
from .logging import get_logger
from .model import Model
from .tensor import Param

logger = get_logger()


@dataclass
class TrainState:
    lr: float
    rng: np.random.Generator
    # Number of completed epochs.
    epoch: int = 0
    # Momentum buffers keyed by parameter name.
    velocity: t.Dict[str, np.ndarray] = field(default_factory=dict)
    # Epoch-mean train loss, one entry per completed epoch.
    loss_history: t.List[float] = field(default_factory=list)
    best_test_acc: float = 0.0
    best_epoch: int = 0
    last_decay_epoch: t.Optional[int] = None

    @classmethod
    def create(cls, model: Model, cfg: TrainConfig) -> 'TrainState':
        return cls(
            lr=cfg.lr_init,
            rng=np.random.default_rng(cfg.seed),
            velocity={p.name: np.zeros_like(p.value) for p in model.params()},
        )


def sgd_step(params: t.Sequence[Param], state: TrainState, cfg: TrainConfig) -> None:
    """
    v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
    Parameters with `decay=False` (BN affines, PReLU slopes, the classifier
    bias) skip the weight-decay term.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}")

    for p in params:
        v = state.velocity.get(p.name)
        if v is None:
            v = state.velocity[p.name] = np.zeros_like(p.value)
        v *= cfg.momentum
        v += p.grad
        if p.decay and cfg.weight_decay:
            v += cfg.weight_decay * p.value
        p.value -= state.lr * v


def lr_schedule_step(history: t.Sequence[float], state: TrainState,
                     cfg: TrainConfig) -> float:
    """
    Divide the learning rate by `lr_decay_factor` (floored at `lr_min`) when
    the mean loss of the last `plateau_window` epochs improves on the epoch
    before that window by less than `plateau_threshold`, relatively. After a
    decay, the next one needs a fresh window of epochs.
    """
    window = cfg.plateau_window
    n = len(history)
    if n < window + 1:
        return state.lr
    if state.last_decay_epoch is not None and n - state.last_decay_epoch < window:
        return state.lr

    ref = history[-window - 1]
    recent = float(np.mean(history[-window:]))
    improvement = (ref - recent) / abs(ref) if ref else 0.0

    if improvement < cfg.plateau_threshold:
        new_lr = max(state.lr / cfg.lr_decay_factor, cfg.lr_min)
        if new_lr < state.lr:
            logger.info(
                "train loss plateaued (%.2e relative improvement); lr %g -> %g",
                improvement, state.lr, new_lr)
            state.lr = new_lr
            state.last_decay_epoch = n
    return state.lr


def train_epoch(
    model: Model,
    dataset: Dataset,
    stats: NormStats,
    cfg: TrainConfig,
    state: TrainState,
    policy: t.Optional[AugmentPolicy] = None,
) -> t.Tuple[float, float]:
    """One shuffled pass with per-batch SGD steps. Returns (mean loss, accuracy)."""
    loader = BatchLoader(
        dataset, cfg.batch_size, stats,
        shuffle=True,
        policy=policy,
        seed=int(state.rng.integers(2**63)),
        prefetch=cfg.prefetch,
    )
    model.train()
    params = model.params()
    total_loss = 0.0
    correct = 0

    for i, (x, y) in enumerate(loader):
        model.zero_grad()
        logits = model.forward(x)
        loss, grad = T.softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {state.epoch + 1}, batch {i}")
        model.backward(grad)
        sgd_step(params, state, cfg)

        total_loss += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        logger.debug("epoch %d batch %d/%d loss %.6f",
                     state.epoch + 1, i + 1, len(loader), loss)

    return total_loss / len(dataset), correct / len(dataset)


def evaluate(model: Model, dataset: Dataset, stats: NormStats,
             batch_size: int = 256) -> float:
    """Eval-mode accuracy over the whole dataset, no augmentation."""
    prev = model.mode
    model.eval()
    correct = 0
    try:
        for x, y in BatchLoader(dataset, batch_size, stats, prefetch=0):
            correct += int(np.sum(model.predict(x) == y))
    finally:
        model.mode = prev
    return correct / len(dataset)


def format_metrics(epoch: int, lr: float, train_loss: float,
                   train_acc: float, test_acc: float) -> str:
    return (
        f"epoch={epoch} lr={lr:.6g} train_loss={train_loss:.6f} "
        f"train_acc={train_acc:.4f} test_acc={test_acc:.4f}")


EpochHook = t.Callable[[Model, TrainState], None]


def fit(
    model: Model,
    train_ds: Dataset,
    test_ds: Dataset,
    stats: NormStats,
    cfg: TrainConfig,
    state: TrainState,
    *,
    policy: t.Optional[AugmentPolicy] = None,
    metrics_path: t.Optional[Path] = None,
    on_epoch_end: t.Optional[EpochHook] = None,
) -> TrainState:
    """
    Train from `state.epoch` up to `cfg.epochs`, appending one metrics line
    per epoch to `metrics_path`.
    """
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        lr = state.lr
        loss, train_acc = train_epoch(model, train_ds, stats, cfg, state, policy)
        test_acc = evaluate(model, test_ds, stats)

        state.epoch = epoch
        state.loss_history.append(loss)
        if test_acc > state.best_test_acc:
            state.best_test_acc, state.best_epoch = test_acc, epoch

        line = format_metrics(epoch, lr, loss, train_acc, test_acc)
        logger.info(line)
        if metrics_path:
            with open(metrics_path, "a") as f:
                f.write(line + "\n")

        lr_schedule_step(state.loss_history, state, cfg)
        if on_epoch_end:
            on_epoch_end(model, state)

    return state

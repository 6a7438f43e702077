#!/usr/bin/env python3
# vim: ft=python
"""
Train, evaluate and inspect X-MLP image classifiers.

Every subcommand reads an optional YAML config (--config) whose keys can be
overridden by flags; the resolved config is echoed to <out>/config.yaml.
"""
import sys

from . import util

# BLAS reads its thread count once, when numpy is first imported.
util.pin_blas_threads(sys.argv)

import json
import typing as t
from pathlib import Path

import clii

from . import (
    analysis,
    checkpoint,
    config,
    data,
    hwinfo,
    logging,
    output,
    train as training,
)
from .errors import ConfigError, NumericError, XmlpError
from .logging import get_logger
from .gradcheck import run_suite, summarize
from .model import build_model

logger = get_logger()

assert sys.version_info >= (3, 8), "Python >=3.8 required"

# CLI flag name -> dotted config key.
FLAG_KEYS = {
    "dataset": "dataset",
    "data_dir": "data_dir",
    "variant": "model.variant",
    "width_mult": "model.width_mult",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "runs": "train.runs",
    "out": "out",
    "checkpoint": "checkpoint",
    "layers": "layers",
    "threads": "threads",
}

DESCRIPTION = (
    (__doc__ or "")
    + "\nconfig keys:\n"
    + "\n".join(f"  {key}" for key in config.schema_keys())
)


def resolve_config(config_path: t.Optional[Path] = None, **flags) -> config.RunConfig:
    overrides = {FLAG_KEYS.get(k, k): v for k, v in flags.items()}
    return config.resolve(config_path, **overrides)


def _check_threads(cfg: config.RunConfig) -> t.Optional[int]:
    """BLAS threads are fixed at import; report a config that asks for others."""
    pinned = util.pinned_threads()
    if cfg.threads and pinned and cfg.threads != pinned:
        logger.warning(
            "BLAS was started with %d threads; threads=%d only applies to a new "
            "process", pinned, cfg.threads)
    logger.debug("BLAS threads: %s", pinned)
    return pinned


def _prepare_out(cfg: config.RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    logging.configure_logger(out, cfg.log_level)
    _check_threads(cfg)
    (out / "config.yaml").write_text(cfg.dump_yaml())
    try:
        (out / "hwinfo.json").write_text(json.dumps(hwinfo.get_hwinfo(), indent=2))
    except Exception:
        logger.exception("couldn't gather hardware info")
    return out


def _latest_checkpoint(out: Path) -> Path:
    final = out / "final.ckpt"
    if final.exists():
        return final
    periodic = sorted((out / "checkpoints").glob("epoch-*.ckpt"))
    if not periodic:
        raise ConfigError(f"nothing to resume in {out}; pass --checkpoint")
    return periodic[-1]


def _truncate_metrics(path: Path, epochs: int):
    """Keep the first `epochs` lines so a resumed run rewrites the rest."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:epochs]))


def _train_one(cfg: config.RunConfig) -> training.TrainState:
    out = _prepare_out(cfg)
    train_ds = data.load_dataset(cfg.dataset, cfg.data_dir, "train")
    test_ds = data.load_dataset(cfg.dataset, cfg.data_dir, "test")
    metrics_path = out / "metrics.log"

    if cfg.resume:
        ckpt = checkpoint.load_checkpoint(cfg.checkpoint or _latest_checkpoint(out))
        model, state, stats = ckpt.model, ckpt.state, ckpt.stats
        if model.spec.model_dump() != cfg.model.model_dump():
            logger.warning(
                "resuming with the checkpoint's model spec, not the config's")
        _truncate_metrics(metrics_path, state.epoch)
        logger.info("resuming at epoch %d (lr %g)", state.epoch + 1, state.lr)
    else:
        stats = data.compute_norm_stats(train_ds.images, train_ds.source_hw)
        model = build_model(cfg.model, seed=cfg.train.seed)
        state = training.TrainState.create(model, cfg.train)
        metrics_path.write_text("")

    logger.info(
        "training %s (%d parameters) on %s: %d train / %d test samples",
        cfg.model.variant.value, model.param_count(), cfg.dataset.value,
        len(train_ds), len(test_ds))

    def save_periodic(model, state):
        if state.epoch % cfg.train.checkpoint_every == 0:
            checkpoint.save_checkpoint(
                out / "checkpoints" / f"epoch-{state.epoch:04d}.ckpt",
                model, state, stats, cfg.train, cfg.dataset.value)

    training.fit(
        model, train_ds, test_ds, stats, cfg.train, state,
        policy=cfg.augment_policy,
        metrics_path=metrics_path,
        on_epoch_end=save_periodic,
    )
    checkpoint.save_checkpoint(
        out / "final.ckpt", model, state, stats, cfg.train, cfg.dataset.value)

    output.make_plots(output.parse_metrics_log(metrics_path), out)
    logger.info("best test accuracy %.4f at epoch %d",
                state.best_test_acc, state.best_epoch)
    return state


def _train_runs(cfg: config.RunConfig) -> t.List[output.RunResult]:
    """Train `train.runs` seeds into <out>/run-<k>/ and summarize them."""
    if cfg.checkpoint:
        raise ConfigError(
            "--checkpoint can't be combined with several runs; --resume picks "
            "up each run from its own directory")
    out = _prepare_out(cfg)
    results = []
    for k in range(1, cfg.train.runs + 1):
        run_cfg = cfg.model_copy(deep=True)
        run_cfg.out = out / f"run-{k}"
        run_cfg.train.seed = cfg.train.seed + k - 1
        run_cfg.train.runs = 1
        if run_cfg.resume and not _has_checkpoint(run_cfg.out):
            run_cfg.resume = False
        logger.info("run %d/%d (seed %d)", k, cfg.train.runs, run_cfg.train.seed)
        state = _train_one(run_cfg)
        final = output.parse_metrics_log(run_cfg.out / "metrics.log")[-1]
        results.append(output.RunResult(
            run=k,
            seed=run_cfg.train.seed,
            final_test_acc=final.test_acc,
            best_test_acc=state.best_test_acc,
            best_epoch=state.best_epoch,
        ))

    logging.configure_logger(out, cfg.log_level)
    summary = output.summarize_runs(results)
    (out / "summary.md").write_text(output.runs_table(results, summary) + "\n")
    (out / "summary.txt").write_text(output.runs_keyvalue(results, summary))
    output.print_runs(results, summary)
    logger.info("final test accuracy over %d runs: %.4f ± %.4f",
                len(results), summary["final_test_acc_mean"],
                summary["final_test_acc_std"])
    return results


def _has_checkpoint(out: Path) -> bool:
    try:
        _latest_checkpoint(out)
    except ConfigError:
        return False
    return True


def cmd_train(cfg: config.RunConfig) -> int:
    if cfg.train.runs > 1:
        _train_runs(cfg)
    else:
        _train_one(cfg)
    return 0


def _require_checkpoint(cfg: config.RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    return Path(cfg.checkpoint)


def cmd_eval(cfg: config.RunConfig) -> int:
    _prepare_out(cfg)
    ckpt = checkpoint.load_checkpoint(_require_checkpoint(cfg))
    if ckpt.dataset and ckpt.dataset != cfg.dataset.value:
        logger.warning("checkpoint was trained on %s, evaluating on %s",
                       ckpt.dataset, cfg.dataset.value)
    test_ds = data.load_dataset(cfg.dataset, cfg.data_dir, "test")
    acc = training.evaluate(ckpt.model, test_ds, ckpt.stats)
    print(f"test_acc={acc:.4f}")
    return 0


def cmd_analyze(cfg: config.RunConfig) -> int:
    out = _prepare_out(cfg)
    report = analysis.analytic_param_count(cfg.model)
    output.print_cost_report(report)
    (out / "analysis.md").write_text(output.cost_table(report) + "\n")
    (out / "analysis.txt").write_text(output.cost_keyvalue(report))
    return 0


def cmd_restore(cfg: config.RunConfig) -> int:
    out = _prepare_out(cfg)
    model = checkpoint.load_checkpoint(_require_checkpoint(cfg)).model
    model.eval()
    indices = util.parse_index_list(cfg.layers) or list(range(1, len(model.layers) + 1))
    ext = ".ppm" if cfg.cmap else ".pgm"
    kernel_dir = out / "kernels"
    kernel_dir.mkdir(exist_ok=True)

    written = []
    for i in indices:
        try:
            k = analysis.layer_kernel(model, i, fold_bn=cfg.fold_bn)
        except XmlpError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"can't restore layer {i}: {e}") from None

        if k.per_channel:
            layer_dir = kernel_dir / f"layer-{i:02d}"
            layer_dir.mkdir(exist_ok=True)
            for c in range(k.kernel.shape[0]):
                written.append(analysis.export_kernel_grid(
                    k, cfg.crop, layer_dir / f"channel-{c:03d}{ext}", cfg.cmap,
                    channel=c))
        else:
            written.append(analysis.export_kernel_grid(
                k, cfg.crop, kernel_dir / f"layer-{i:02d}{ext}", cfg.cmap))

    logger.info("wrote %d kernel grids under %s", len(written), kernel_dir)
    return 0


def cmd_gradcheck(cfg: config.RunConfig) -> int:
    _prepare_out(cfg)
    results = run_suite(cfg.gradcheck_seeds, cfg.gradcheck_tol32, cfg.gradcheck_tol64)
    summary = summarize(results)
    output.print_gradcheck_table(summary)

    failed = [name for name, _, _, ok in summary if not ok]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


cli = clii.App(description=DESCRIPTION)
cli.add_arg("--verbose", "-v", action="store_true")


def _cfg(config_path, **flags) -> config.RunConfig:
    cfg = resolve_config(config_path, **flags)
    if cli.args.verbose:
        cfg.log_level = "DEBUG"
    return cfg


@cli.cmd
def train(
    config: Path = None,
    dataset: str = None,
    data_dir: Path = None,
    variant: str = None,
    width_mult: float = None,
    epochs: int = None,
    batch_size: int = None,
    seed: int = None,
    runs: int = None,
    out: Path = None,
    checkpoint: Path = None,
    resume: bool = False,
    threads: int = None,
):
    """
    Train a model from scratch (or --resume a run) and write the metrics log,
    checkpoints and a training plot to the output dir.

    Args:
        config: YAML config file
        dataset: mnist, kmnist, fashion-mnist or cifar10
        data_dir: directory holding the dataset files
        variant: basic, expansion, alternate or superior
        width_mult: scale every layer's channel count
        runs: train this many seeds into <out>/run-<k>/ and average them
        resume: continue from --checkpoint, or the latest one in --out
        threads: BLAS thread count
    """
    sys.exit(cmd_train(_cfg(
        config, dataset=dataset, data_dir=data_dir, variant=variant,
        width_mult=width_mult, epochs=epochs, batch_size=batch_size, seed=seed,
        runs=runs, out=out, checkpoint=checkpoint, threads=threads,
        resume=resume or None)))


def eval_checkpoint(
    checkpoint: Path = None,
    config: Path = None,
    dataset: str = None,
    data_dir: Path = None,
    out: Path = None,
    threads: int = None,
):
    """Print the test accuracy of a checkpoint."""
    sys.exit(cmd_eval(_cfg(
        config, checkpoint=checkpoint, dataset=dataset, data_dir=data_dir,
        out=out, threads=threads)))


# Registered as `xmlp eval`; clii names subcommands after the function.
eval_checkpoint.__name__ = "eval"
cli.cmd(eval_checkpoint)


@cli.cmd
def analyze(
    config: Path = None,
    dataset: str = None,
    variant: str = None,
    width_mult: float = None,
    out: Path = None,
):
    """Print itemized parameter and MAC counts for a model spec."""
    sys.exit(cmd_analyze(_cfg(
        config, dataset=dataset, variant=variant, width_mult=width_mult, out=out)))


@cli.cmd
def restore(
    checkpoint: Path = None,
    layers: str = None,
    config: Path = None,
    out: Path = None,
    fold_bn: bool = False,
    cmap: str = None,
):
    """
    Restore the composed spatial kernels of a checkpoint's layers and write
    them as kernel grid images.

    Args:
        layers: 1-based layer selection, e.g. "1,3,5-7"; default all
        fold_bn: fold eval-mode BN scales in, one grid per channel
        cmap: matplotlib colormap for P6 output instead of P5 grayscale
    """
    sys.exit(cmd_restore(_cfg(
        config, checkpoint=checkpoint, layers=layers, out=out,
        fold_bn=fold_bn or None, cmap=cmap)))


@cli.cmd
def gradcheck(config: Path = None, out: Path = None):
    """Run the finite-difference suite over every op and layer variant."""
    sys.exit(cmd_gradcheck(_cfg(config, out=out)))


def main():
    try:
        cli.run()
    except XmlpError as e:
        print(f"error [{e.category}]: {e}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()

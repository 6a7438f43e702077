import re
import sys
import typing as t
from pathlib import Path

import numpy as np
import pytablewriter
import matplotlib
# Force matplotlib to not use any Xwindows backend.
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from .analysis import CostReport
from .errors import ParseError
from .logging import get_logger

logger = get_logger()


class EpochMetrics(t.NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


METRICS_LINE_REGEX = re.compile(
    r'^epoch=(?P<epoch>\d+) lr=(?P<lr>\S+) train_loss=(?P<train_loss>\S+) '
    r'train_acc=(?P<train_acc>\S+) test_acc=(?P<test_acc>\S+)$')


def parse_metrics_log(path: Path) -> t.List[EpochMetrics]:
    """Read back the one-line-per-epoch metrics log written by training."""
    out = []
    offset = 0
    for line in Path(path).read_text().splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            match = METRICS_LINE_REGEX.match(stripped)
            if not match:
                raise ParseError(f"malformed metrics line {stripped!r}", path, offset)
            g = match.groupdict()
            out.append(EpochMetrics(
                epoch=int(g['epoch']),
                lr=float(g['lr']),
                train_loss=float(g['train_loss']),
                train_acc=float(g['train_acc']),
                test_acc=float(g['test_acc']),
            ))
        offset += len(line.encode())
    return out


def _writer(headers, rows, pfile) -> pytablewriter.MarkdownTableWriter:
    writer = pytablewriter.MarkdownTableWriter()
    writer.headers = headers
    writer.value_matrix = rows
    writer.margin = 1
    if pfile is not None:
        writer.stream = pfile
    return writer


def cost_table(report: CostReport) -> str:
    """Per-layer parameters and MACs next to the convolution / full-FC comparisons."""
    headers = [
        "layer", "shape in -> out", "spatial", "channel", "mixer", "bn", "prelu",
        "params", "conv params", "fc spatial", "macs", "nominal macs", "conv macs",
    ]
    rows = []
    for lc in report.layers:
        s = lc.spec
        rows.append([
            lc.index,
            f"{s.c_in}x{s.h_in}x{s.w_in} -> {s.c_out}x{s.h_out}x{s.w_out}",
            lc.spatial, lc.channel, lc.mixer, lc.bn, lc.prelu, lc.params,
            lc.conv_params, lc.fc_spatial_params, lc.macs, lc.nominal_macs,
            lc.conv_macs,
        ])
    tot = report.totals()
    if report.classifier_params:
        rows.append(["classifier", "", "", "", "", "", "", report.classifier_params,
                     "", "", report.classifier_macs, "", ""])
    rows.append([
        "total", "", tot["spatial"], tot["channel"], tot["mixer"], tot["bn"],
        tot["prelu"], tot["params"], tot["conv_params"], tot["fc_spatial_params"],
        tot["macs"], tot["nominal_macs"], tot["conv_macs"],
    ])

    shape = 'x'.join(map(str, report.input_shape))
    title = f"### {report.variant} {shape} (K={report.kernel})\n"
    return title + _writer(headers, rows, None).dumps()


def cost_keyvalue(report: CostReport) -> str:
    lines = [
        f"variant={report.variant}",
        f"input_shape={'x'.join(map(str, report.input_shape))}",
        f"kernel={report.kernel}",
    ]
    for lc in report.layers:
        lines.append(f"layer.{lc.index}.params={lc.params}")
        lines.append(f"layer.{lc.index}.macs={lc.macs}")
    lines.extend(f"total.{k}={v}" for k, v in report.totals().items())
    lines.append(f"total.gmacs={report.total_macs / 1e9:.6f}")
    return "\n".join(lines) + "\n"


def print_cost_report(report: CostReport, pfile=sys.stdout):
    pfile.write(cost_table(report) + "\n\n")
    pfile.write(f"total parameters: {report.total_params:,}\n")
    pfile.write(f"total GMACs per sample: {report.total_macs / 1e9:.4f}\n")


def print_gradcheck_table(summary, pfile=sys.stdout):
    rows = [
        [name, f"{e32:.3e}", f"{e64:.3e}", "ok" if ok else "FAIL"]
        for name, e32, e64, ok in summary
    ]
    headers = ["case", "max err (float32)", "max err (float64)", "status"]
    _writer(headers, rows, pfile).write_table()


class RunResult(t.NamedTuple):
    run: int
    seed: int
    final_test_acc: float
    best_test_acc: float
    best_epoch: int


def _mean_std(values: t.Sequence[float]) -> t.Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    # Sample std; a single run has no spread.
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def summarize_runs(results: t.Sequence[RunResult]) -> t.Dict[str, float]:
    if not results:
        raise ValueError("no runs to summarize")
    final_mean, final_std = _mean_std([r.final_test_acc for r in results])
    best_mean, best_std = _mean_std([r.best_test_acc for r in results])
    return {
        "runs": len(results),
        "final_test_acc_mean": final_mean,
        "final_test_acc_std": final_std,
        "best_test_acc_mean": best_mean,
        "best_test_acc_std": best_std,
    }


def runs_table(results: t.Sequence[RunResult], summary: t.Dict[str, float]) -> str:
    headers = ["run", "seed", "final test acc", "best test acc", "best epoch"]
    rows: t.List[t.List[t.Any]] = [
        [r.run, r.seed, f"{r.final_test_acc:.4f}", f"{r.best_test_acc:.4f}",
         r.best_epoch]
        for r in results
    ]
    rows.append([
        "mean ± std", "",
        f"{summary['final_test_acc_mean']:.4f} ± {summary['final_test_acc_std']:.4f}",
        f"{summary['best_test_acc_mean']:.4f} ± {summary['best_test_acc_std']:.4f}",
        "",
    ])
    return _writer(headers, rows, None).dumps()


def runs_keyvalue(results: t.Sequence[RunResult], summary: t.Dict[str, float]) -> str:
    lines = []
    for r in results:
        lines.append(f"run.{r.run}.seed={r.seed}")
        lines.append(f"run.{r.run}.final_test_acc={r.final_test_acc:.4f}")
        lines.append(f"run.{r.run}.best_test_acc={r.best_test_acc:.4f}")
    lines.append(f"runs={summary['runs']}")
    lines.extend(
        f"{k}={v:.6f}" for k, v in summary.items() if k != "runs")
    return "\n".join(lines) + "\n"


def print_runs(results: t.Sequence[RunResult], summary: t.Dict[str, float],
               pfile=sys.stdout):
    pfile.write(runs_table(results, summary) + "\n")


def make_plots(metrics: t.Sequence[EpochMetrics], out_dir: Path) -> t.Optional[Path]:
    """Render loss and accuracy curves to <out_dir>/plots/training.png."""
    if not metrics:
        logger.warning("no metrics to plot")
        return None

    output_path = Path(out_dir) / 'plots'
    output_path.mkdir(exist_ok=True)

    plt.rcParams.update({'font.family': 'monospace', 'font.size': 8})
    epochs = [m.epoch for m in metrics]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))

    ax_loss.plot(epochs, [m.train_loss for m in metrics], label='train loss')
    ax_loss.set_xlabel('epoch')
    ax_loss.set_ylabel('cross entropy')
    ax_loss.legend()

    ax_acc.plot(epochs, [m.train_acc for m in metrics], label='train')
    ax_acc.plot(epochs, [m.test_acc for m in metrics], label='test')
    ax_acc.set_xlabel('epoch')
    ax_acc.set_ylabel('accuracy')
    ax_acc.legend()

    fig.tight_layout()
    dest = output_path / 'training.png'
    fig.savefig(dest)
    plt.close(fig)
    logger.info("wrote %s", dest)
    return dest

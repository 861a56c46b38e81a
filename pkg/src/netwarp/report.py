"""Report rendering: delimited CSV output plus matplotlib figures saved
alongside it."""

from __future__ import annotations

import csv
import os

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def write_loss_report(out_dir, losses):
    """loss.csv (step,loss) and a loss-curve figure."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "loss.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.6f}"])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    if losses:
        ax.plot(losses, lw=0.8, alpha=0.5, label="loss")
        k = min(20, len(losses))
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k - 1, len(losses)), smooth, lw=1.5, label=f"{k}-step mean")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curve.png"), dpi=120)
    plt.close(fig)
    return csv_path


def write_metrics_report(out_dir, reports, band_px=2):
    """metrics.csv with one row per (mode, class) plus a summary figure.

    reports: {mode: MetricsReport}; every mode shares the class set.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "class", "iou", "tiou", "iiou"])
        for mode, rep in reports.items():
            for row in rep.csv_rows()[1:]:
                w.writerow([mode, *row])

    modes = list(reports)
    names = ["IoU", f"tIoU(band={band_px})", "iIoU"]
    vals = np.array([[reports[m].mean_iou, reports[m].mean_tiou, reports[m].mean_iiou]
                     for m in modes])
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    x = np.arange(len(names))
    width = 0.8 / max(len(modes), 1)
    for i, mode in enumerate(modes):
        ax.bar(x + i * width, vals[i], width, label=mode)
    ax.set_xticks(x + width * (len(modes) - 1) / 2)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean score")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "metrics.png"), dpi=120)
    plt.close(fig)
    return csv_path


def print_metrics_table(reports, band_px=2):
    header = f"{'mode':<20} {'mIoU':>8} {'mtIoU':>8} {'miIoU':>8}"
    lines = [header, "-" * len(header)]
    for mode, rep in reports.items():
        lines.append(f"{mode:<20} {rep.mean_iou:>8.4f} {rep.mean_tiou:>8.4f} "
                     f"{rep.mean_iiou:>8.4f}")
    return "\n".join(lines)


def write_bench_report(out_dir, rows):
    """bench.csv with timing rows and a bar figure of the medians.

    rows: list of dicts with keys case, median_ms, p95_ms, iters, threads.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "bench.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case", "median_ms", "p95_ms", "iters", "threads"])
        for r in rows:
            w.writerow([r["case"], f"{r['median_ms']:.4f}", f"{r['p95_ms']:.4f}",
                        r["iters"], r["threads"]])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["case"] for r in rows], [r["median_ms"] for r in rows])
    ax.set_ylabel("median wall time (ms)")
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "bench.png"), dpi=120)
    plt.close(fig)
    return csv_path

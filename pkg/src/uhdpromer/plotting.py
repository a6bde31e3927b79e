"""Report figures written next to the CSV/text outputs of each CLI command."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=6.0, height=None, **kw):
    height = height or width * 0.618
    with plt.rc_context(RC):
        return plt.subplots(figsize=(width, height), **kw)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path)
    plt.close(fig)
    return path


def read_training_log(path) -> dict:
    cols: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v))
    return {k: np.asarray(v) for k, v in cols.items()}


def plot_training_curves(log_path, out_path) -> Path:
    """Loss terms (log scale) against step, with the lr on a twin axis."""
    log = read_training_log(log_path)
    fig, ax = _figure()
    for key, style in (("loss", "-"), ("loss_main", "--"), ("loss_sr", ":")):
        if key in log and np.any(log[key] > 0):
            ax.semilogy(log["step"], log[key], style, label=key, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(log["step"], log["lr"], color="0.6", lw=0.8)
    ax2.set_ylabel("learning rate", color="0.4")
    ax2.spines["right"].set_visible(True)
    ax.legend(loc="upper right", frameon=False)
    return _save(fig, out_path)


def plot_flop_ledgers(ledgers, out_path) -> Path:
    """Stacked per-stage GFLOPs, one bar per input size."""
    stages = []
    for led in ledgers:
        for k in led.by_stage():
            if k not in stages:
                stages.append(k)
    labels = [f"{led.height}x{led.width}" for led in ledgers]
    fig, ax = _figure(width=max(4.0, 1.5 * len(ledgers) + 3))
    bottom = np.zeros(len(ledgers))
    for st in stages:
        vals = np.array([led.by_stage().get(st, 0) / 1e9 for led in ledgers])
        ax.bar(labels, vals, bottom=bottom, label=st, width=0.6)
        bottom += vals
    ax.set_ylabel("GFLOPs (2 x MAC)")
    ax.legend(frameon=False, bbox_to_anchor=(1.02, 1), loc="upper left")
    return _save(fig, out_path)


def plot_ndp_maps(grays, out_path, titles=None) -> Path:
    """Grid of uint8 prior maps (one per block)."""
    n = len(grays)
    cols = min(n, 5)
    rows = (n + cols - 1) // cols
    fig, axes = _figure(width=2.0 * cols, height=2.0 * rows, nrows=rows, ncols=cols, squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(grays[i], cmap="gray", vmin=0, vmax=255, interpolation="nearest")
            ax.set_title(titles[i] if titles else f"block {i}")
    return _save(fig, out_path)


def plot_param_counts(rows, out_path) -> Path:
    """``rows``: (variant, ours_params, published_millions or None)."""
    names = [r[0] for r in rows]
    ours = np.array([r[1] / 1e6 for r in rows])
    ref = np.array([np.nan if r[2] is None else r[2] for r in rows])
    x = np.arange(len(rows))
    fig, ax = _figure(width=7.0)
    ax.bar(x - 0.2, ours, 0.4, label="this build")
    ax.bar(x + 0.2, np.nan_to_num(ref), 0.4, label="published", color="0.7")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("parameters (M)")
    ax.legend(frameon=False)
    return _save(fig, out_path)


def plot_metrics(report, out_path) -> Path:
    names = [r[0] for r in report.rows]
    ps = np.array([r[1] for r in report.rows], dtype=float)
    ss = np.array([r[2] for r in report.rows], dtype=float)
    finite = np.where(np.isfinite(ps), ps, np.nan)
    fig, (a1, a2) = _figure(width=7.0, ncols=2)
    a1.bar(range(len(names)), np.nan_to_num(finite, nan=0.0))
    a1.set_ylabel("PSNR (dB)")
    a2.bar(range(len(names)), ss, color="tab:orange")
    a2.set_ylabel("SSIM")
    for ax in (a1, a2):
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
    return _save(fig, out_path)

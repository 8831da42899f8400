"""Figure rendering for run artifacts.

Every report path writes a PNG next to its CSV/JSON output: the training
loss curve, per-metric bars for an eval run, and grouped bars for an
ablation comparison.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_loss_curve(steps, losses, lrs, path) -> Path:
    steps = np.asarray(steps)
    losses = np.asarray(losses, dtype=np.float64)
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 5), sharex=True, height_ratios=[3, 1]
    )
    ax_loss.plot(steps, losses, lw=0.6, alpha=0.4, color="tab:blue", label="loss")
    window = max(1, min(100, len(losses) // 10 or 1))
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax_loss.plot(
            steps[window - 1 :],
            smooth,
            lw=1.5,
            color="tab:red",
            label=f"mean({window})",
        )
    ax_loss.set_ylabel("objective")
    ax_loss.legend(frameon=False)
    ax_lr.plot(steps, lrs, lw=1.0, color="tab:green")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    return _finish(fig, path)


def save_metric_bars(values: dict[str, float], path, title: str = "") -> Path:
    names = list(values)
    heights = [values[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(names) + 2), 4))
    ax.bar(range(len(names)), heights, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    for i, h in enumerate(heights):
        ax.text(i, h, f"{h:.3f}", ha="center", va="bottom", fontsize=7)
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def save_ablation_chart(
    rows: list[dict], metric_keys: list[str], path
) -> Path:
    """Grouped bars: one group per metric, one bar per variant row."""
    variants = [row["variant"] for row in rows]
    n_var = len(variants)
    width = 0.8 / max(n_var, 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(metric_keys)), 4))
    base = np.arange(len(metric_keys))
    for i, row in enumerate(rows):
        heights = [float(row.get(k, float("nan"))) for k in metric_keys]
        ax.bar(base + i * width, heights, width=width, label=row["variant"])
    ax.set_xticks(base + width * (n_var - 1) / 2)
    ax.set_xticklabels(metric_keys, rotation=30, ha="right", fontsize=8)
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("variant comparison")
    return _finish(fig, path)

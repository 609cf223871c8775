"""Matplotlib figures for run directories and method comparisons."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from fcil.models import MetricReport  # noqa: E402

logger = logging.getLogger(__name__)

TRANSFER_METRICS = ("BwT", "FwT", "Forgetting", "Remembering")


def plot_accuracy_curves(curves: dict[str, list[float]], path: str | Path, title: str = "") -> Path:
    """Overall accuracy after each task, one line per method (T points each)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in curves.items():
        xs = np.arange(1, len(values) + 1)
        ax.plot(xs, np.asarray(values) * 100, marker="o", label=label)
    ax.set_xlabel("Tasks learned")
    ax.set_ylabel("Accuracy (%)")
    ax.set_title(title or "Accuracy after each task")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_final_per_task(final_rows: dict[str, list[float]], path: str | Path) -> Path:
    """Accuracy on every task after the last one, grouped bars per method."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = list(final_rows)
    T = max(len(row) for row in final_rows.values())
    width = 0.8 / max(len(labels), 1)
    for i, label in enumerate(labels):
        row = np.asarray(final_rows[label]) * 100
        ax.bar(np.arange(len(row)) + i * width, row, width=width, label=label)
    ax.set_xticks(np.arange(T) + width * (len(labels) - 1) / 2, [f"task {j}" for j in range(T)])
    ax.set_ylabel("Final accuracy (%)")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_partition_heatmap(counts: pd.DataFrame, path: str | Path, task: int | None = None) -> Path:
    """Client × class sample counts for one task (default: the last one)."""
    if task is None:
        task = int(counts["task"].max())
    table = (
        counts[counts["task"] == task]
        .pivot_table(index="client_id", columns="class_id", values="count", aggfunc="sum", fill_value=0)
        .sort_index()
        .sort_index(axis=1)
    )
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * table.shape[1] + 2), max(3, 0.4 * table.shape[0] + 1)))
    image = ax.imshow(table.to_numpy(), aspect="auto", cmap="viridis")
    ax.set_xticks(range(table.shape[1]), [str(c) for c in table.columns])
    ax.set_yticks(range(table.shape[0]), [str(c) for c in table.index])
    ax.set_xlabel("Class")
    ax.set_ylabel("Client")
    ax.set_title(f"Samples per client and class, task {task}")
    fig.colorbar(image, ax=ax)
    return _save(fig, path)


def plot_metric_bars(metrics: dict[str, MetricReport], path: str | Path) -> Path:
    """BwT, FwT, Forgetting and Remembering side by side for every method."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = list(metrics)
    width = 0.8 / max(len(labels), 1)
    for i, label in enumerate(labels):
        values = [getattr(metrics[label], name) for name in TRANSFER_METRICS]
        values = [np.nan if v is None else v for v in values]
        ax.bar(np.arange(len(TRANSFER_METRICS)) + i * width, values, width=width, label=label)
    ax.set_xticks(np.arange(len(TRANSFER_METRICS)) + width * (len(labels) - 1) / 2, TRANSFER_METRICS)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def _save(fig: plt.Figure, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    logger.debug(f"Wrote {target}")
    return target

"""Static figures for evaluation tables, MI estimates and training curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def metric_bars(labels, means, stds, path, ylabel: str = "metric (lower is better)",
                title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels) + 1.5), 3.5))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def mi_bars(labels, values, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(labels) + 1.5), 3.5))
    vals = np.nan_to_num(np.asarray(values, dtype=float), nan=0.0)
    ax.bar(np.arange(len(labels)), vals, color="#dd8452")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("I(z; y) [nats]")
    return _save(fig, path)


def read_metrics(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter="\t", ndmin=2)
    if data.size == 0:
        return np.empty(0), np.empty(0), np.empty(0)
    return data[:, 0], data[:, 1], data[:, 2]


def loss_curves(curves: dict[str, str | Path], path, smooth: float = 0.98) -> Path:
    """Plot one EMA-smoothed loss curve per named metrics file."""
    from .training import ema

    fig, ax = plt.subplots(figsize=(6.0, 3.5))
    for name, metrics in curves.items():
        steps, losses, _ = read_metrics(metrics)
        if steps.size:
            ax.plot(steps, ema(losses, smooth), label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (EMA)")
    if curves:
        ax.legend(fontsize=8)
    return _save(fig, path)

"""Figures written next to the JSON/TSV reports (headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curve(rows: Sequence[dict], path, smooth: int = 25) -> Path:
    steps = np.array([r["step"] for r in rows])
    loss = np.array([r["loss"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="loss")
    if len(loss) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(steps[smooth - 1 :], np.convolve(loss, k, mode="valid"), lw=1.4, label=f"mean of {smooth}")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    return _save(fig, path)


def f1_bars(report: dict, path, skyline: dict | None = None) -> Path:
    """Per-threshold localisation F1, optionally against a reference report."""
    ths = list(report["f1_per_threshold"])
    x = np.arange(len(ths))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    w = 0.38 if skyline else 0.6
    ax.bar(x - (w / 2 if skyline else 0), [report["f1_per_threshold"][t] for t in ths], w, label="model")
    if skyline:
        ax.bar(x + w / 2, [skyline["f1_per_threshold"][t] for t in ths], w, label="skyline")
        ax.legend()
    ax.set_xticks(x, [f"IoU {t}" for t in ths])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    return _save(fig, path)


def savings_vs_segments(Ts: Sequence[int], savings: Sequence[float], path, label: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(Ts), [100 * s for s in savings], marker="o")
    ax.set_xlabel("segments T")
    ax.set_ylabel("decoder savings (%)")
    if label:
        ax.set_title(label)
    ax.grid(alpha=0.3)
    return _save(fig, path)

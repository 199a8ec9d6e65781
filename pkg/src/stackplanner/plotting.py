"""Figures rendered next to CLI outputs (headless, Agg backend)."""

from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.4, 4.0)


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_learning_curve(
    curve: Sequence[float],
    path: str | os.PathLike,
    baseline: float | None = None,
    window: int = 10,
) -> None:
    """Per-iteration mean reward with a trailing moving average."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    xs = range(len(curve))
    ax.plot(xs, curve, color="0.7", linewidth=0.8, label="group mean reward")
    if len(curve) >= window:
        smooth = [sum(curve[i - window + 1:i + 1]) / window for i in range(window - 1, len(curve))]
        ax.plot(range(window - 1, len(curve)), smooth, color="C0", linewidth=1.6, label=f"{window}-iteration mean")
    if baseline is not None:
        ax.axhline(baseline, color="C3", linestyle="--", linewidth=1.0, label="uniform policy")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean outcome reward")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def plot_f1_histogram(f1_scores: Sequence[float], path: str | os.PathLike, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.hist(list(f1_scores), bins=10, range=(0.0, 1.0), color="C0", edgecolor="white")
    ax.set_xlabel("token F1")
    ax.set_ylabel("examples")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_ablation(aggregates: Mapping[str, Mapping[str, float]], path: str | os.PathLike) -> None:
    """Grouped bars of mean F1 and EM per ablation setting."""
    labels = list(aggregates)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    width = 0.38
    xs = range(len(labels))
    ax.bar([x - width / 2 for x in xs], [aggregates[k]["mean_f1"] for k in labels], width, label="F1")
    ax.bar([x + width / 2 for x in xs], [aggregates[k]["mean_em"] for k in labels], width, label="EM")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([label.replace(",", "\n") for label in labels])
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    _save(fig, path)

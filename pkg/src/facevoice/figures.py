"""Matplotlib rendering of run artifacts to image files.

Every figure lands next to its delimited counterpart: loss curves beside
the loss CSV, the DET plot beside det.csv, sweep bars beside the sweep
table. Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(curves: Mapping[str, Sequence[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        if values:
            ax.plot(range(1, len(values) + 1), values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_det_curves(named_points: Mapping[str, Sequence[tuple[float, float, float]]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, points in named_points.items():
        far = [p[1] for p in points]
        frr = [p[2] for p in points]
        ax.plot(far, frr, label=name)
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=1)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("false reject rate")
    ax.set_title("DET")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_score_histogram(target_scores: Sequence[float], nontarget_scores: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(target_scores, bins=30, alpha=0.6, label="target (same person)")
    ax.hist(nontarget_scores, bins=30, alpha=0.6, label="nontarget")
    ax.set_xlabel("Euclidean distance")
    ax.set_ylabel("trials")
    ax.set_title("score distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_sweep_bars(rows: Sequence[Mapping], value_key: str, group_key: str, path,
                    title: str = "sweep") -> Path:
    """Grouped bar chart of EER cells, one group per config value."""
    configs = list(dict.fromkeys(r["config"] for r in rows))
    groups = list(dict.fromkeys(r[group_key] for r in rows))
    width = 0.8 / max(len(groups), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(configs)), 4))
    for gi, group in enumerate(groups):
        xs, ys = [], []
        for ci, config in enumerate(configs):
            for r in rows:
                if r["config"] == config and r[group_key] == group:
                    xs.append(ci + gi * width)
                    ys.append(r[value_key])
                    break
        ax.bar(xs, ys, width=width, label=str(group))
    ax.set_xticks([i + width * (len(groups) - 1) / 2 for i in range(len(configs))])
    ax.set_xticklabels([str(c) for c in configs])
    ax.set_ylabel("EER")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

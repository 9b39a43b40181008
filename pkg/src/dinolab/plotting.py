"""Report figures (written to files, never shown)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalItem  # noqa: E402


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC curve over distinct thresholds, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0.0, fp / max(fp[-1], 1)], np.r_[0.0, tp / max(tp[-1], 1)]


def plot_roc(items: Sequence[EvalItem], path: str | Path, unified: bool = False) -> Path:
    by_cat = defaultdict(list)
    for it in items:
        by_cat[it.category].append(it)
    fig, ax = plt.subplots(figsize=(5, 5))
    for cat, group in sorted(by_cat.items()):
        labels = [g.label for g in group]
        if len(set(labels)) < 2:
            continue
        ax.plot(*roc_points([g.score for g in group], labels), lw=1, label=cat)
    if unified and len({it.label for it in items}) == 2:
        ax.plot(*roc_points([it.score for it in items], [it.label for it in items]), "k--", lw=2, label="unified")
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title="image-level ROC")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_score_histogram(items: Sequence[EvalItem], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    normal = [it.score for it in items if it.label == 0]
    anomalous = [it.score for it in items if it.label == 1]
    bins = np.histogram_bin_edges(normal + anomalous or [0.0], bins=30)
    ax.hist(normal, bins=bins, alpha=0.6, label="normal")
    ax.hist(anomalous, bins=bins, alpha=0.6, label="anomalous")
    ax.set(xlabel="image score", ylabel="count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_loss(history: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["iter"] for h in history], [h["loss"] for h in history], lw=0.8)
    ax.set(xlabel="iteration", ylabel="loss", yscale="log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

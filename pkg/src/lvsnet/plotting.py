"""Matplotlib figures written next to the CSV outputs.

Every figure is drawn from data already on disk or in memory; nothing here
feeds back into metrics.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


@contextmanager
def figure(width=4.0, height=3.6, path=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height))
        try:
            yield fig, ax
            if path is not None:
                Path(path).parent.mkdir(parents=True, exist_ok=True)
                fig.savefig(path)
        finally:
            plt.close(fig)


def plot_roc(roc: Dict[str, Dict], path, title: str = "ROC") -> Path:
    """``roc`` is the mapping returned by :func:`lvsnet.reports.read_roc`."""
    with figure(path=path) as (fig, ax):
        for label, d in roc.items():
            ax.plot(d["fpr"], d["tpr"], lw=1.4, label=f"{label} (AUC {d['auc']:.3f})")
        ax.plot([0, 1], [0, 1], ls=":", c="0.6", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
    return Path(path)


def plot_training(epochs: Sequence, path) -> Path:
    """Train loss and validation dice per epoch from a run record's epoch list."""
    xs = [e.epoch for e in epochs]
    with figure(width=5.0, height=3.2, path=path) as (fig, ax):
        ax.plot(xs, [e.train_loss for e in epochs], c="tab:blue", label="train dice loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(xs, [e.val_dice for e in epochs], c="tab:orange", label="validation dice")
        ax2.set_ylabel("dice")
        ax2.set_ylim(0, 1)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
    return Path(path)


def plot_ablation(table: Sequence[Tuple[str, Dict[str, float]]], path, columns=("Dice", "J", "Acc", "Sn", "Sp")) -> Path:
    n = len(table)
    width = 0.8 / max(n, 1)
    with figure(width=max(4.0, 1.2 * len(columns)), height=3.2, path=path) as (fig, ax):
        for i, (row, vals) in enumerate(table):
            xs = [j + (i - (n - 1) / 2) * width for j in range(len(columns))]
            ax.bar(xs, [100 * vals[c] for c in columns], width=width, label=row)
        ax.set_xticks(range(len(columns)))
        ax.set_xticklabels(columns)
        ax.set_ylabel("%")
        ax.legend(frameon=False, fontsize=7)
    return Path(path)

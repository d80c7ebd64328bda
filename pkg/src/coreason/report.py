"""Report rendering: delimited metric tables plus matplotlib figures.

Figures render headlessly (Agg) straight to files; nothing here opens a
window. Every function returns the path(s) it wrote so callers can list
them in logs.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .attention import AttentionRecord  # noqa: E402
from .errors import InputError  # noqa: E402


def write_delimited(rows: list[dict], path: str,
                    delimiter: str = "\t") -> str:
    """One header row from the union of keys (first-seen order), then one
    line per dict; missing cells are empty."""
    if not rows:
        raise InputError("no rows to write")
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, delimiter=delimiter,
                                restval="")
        writer.writeheader()
        writer.writerows(rows)
    return path


def training_curves_figure(history: list[dict], path: str) -> str:
    """Loss and accuracy per epoch, train vs eval where present."""
    if not history:
        raise InputError("no training history to plot")
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [row["train_loss"] for row in history],
                 label="train")
    if "eval_loss" in history[0]:
        ax_loss.plot(epochs, [row["eval_loss"] for row in history],
                     label="eval")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.set_title("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [row["train_accuracy"] for row in history],
                label="train")
    if "eval_accuracy" in history[0]:
        ax_acc.plot(epochs, [row["eval_accuracy"] for row in history],
                    label="eval")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.set_title("accuracy")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def attention_heatmaps_figure(records: list[AttentionRecord], path: str,
                              max_panels: int = 8) -> str:
    """Grid of weight matrices; multi-head and stacked records are
    flattened to one panel per head (first stack slice)."""
    if not records:
        raise InputError("no attention records to plot")
    panels: list[tuple[str, np.ndarray]] = []
    for rec in records:
        w = rec.weights
        while w.ndim > 3:  # stacked sequences: show the first
            w = w[0]
        if w.ndim == 3:
            for hi in range(w.shape[0]):
                panels.append((f"{rec.label} h{hi}", w[hi]))
        else:
            panels.append((rec.label, w))
        if len(panels) >= max_panels:
            break
    panels = panels[:max_panels]
    cols = min(4, len(panels))
    rows = (len(panels) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.6 * rows),
                             squeeze=False)
    for ax in axes.flat:
        ax.set_visible(False)
    for ax, (label, w) in zip(axes.flat, panels):
        ax.set_visible(True)
        im = ax.imshow(w, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(label, fontsize=8)
        ax.set_xlabel("key")
        ax.set_ylabel("query")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_figure(accuracies: dict[str, float], path: str) -> str:
    """Bar chart of variant accuracies."""
    if not accuracies:
        raise InputError("no ablation results to plot")
    names = list(accuracies)
    values = [accuracies[n] for n in names]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 4))
    bars = ax.bar(names, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("eval accuracy")
    ax.set_title("variant comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(out_dir: str, history: list[dict] | None = None,
                  eval_rows: list[dict] | None = None,
                  attention: list[AttentionRecord] | None = None,
                  ablation: dict[str, float] | None = None) -> list[str]:
    """Write whatever sections are present; returns the created paths."""
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    if history:
        written.append(write_delimited(
            history, os.path.join(out_dir, "metrics.tsv")))
        written.append(training_curves_figure(
            history, os.path.join(out_dir, "curves.png")))
    if eval_rows:
        written.append(write_delimited(
            eval_rows, os.path.join(out_dir, "predictions.tsv")))
    if attention:
        written.append(attention_heatmaps_figure(
            attention, os.path.join(out_dir, "attention.png")))
    if ablation:
        written.append(write_delimited(
            [{"variant": k, "accuracy": v} for k, v in ablation.items()],
            os.path.join(out_dir, "ablation.tsv")))
        written.append(ablation_figure(
            ablation, os.path.join(out_dir, "ablation.png")))
    if not written:
        raise InputError("nothing to report")
    return written

"""Figures for the analysis reports, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.linewidth": 0.6,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
    "svg.hashsalt": "bnmt",  # stable element ids
}


_METADATA = {
    "png": {"Software": None},
    "svg": {"Date": None, "Creator": None},
    "pdf": {"CreationDate": None, "Creator": None, "Producer": None},
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # drop timestamps and version strings so repeated runs write identical bytes
    meta = _METADATA.get(path.suffix.lower().lstrip("."), {})
    fig.savefig(path, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def length_bleu_figure(buckets: Mapping[str, Mapping], path, label: str = "model") -> Path:
    """Bar chart of BLEU per source-length bucket, counts above the bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(buckets)
        values = [100.0 * buckets[n]["bleu"] for n in names]
        x = np.arange(len(names))
        bars = ax.bar(x, values, width=0.6, color="#4c72b0", label=label)
        for bar, n in zip(bars, names):
            ax.annotate(f"n={buckets[n]['count']}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x, names)
        ax.set_xlabel("source length")
        ax.set_ylabel("BLEU")
        ax.set_ylim(0, max(values + [1.0]) * 1.15)
        ax.spines[["top", "right"]].set_visible(False)
        return _save(fig, path)


def confusion_figure(table: Mapping[str, Mapping[str, float]], path) -> Path:
    """Heatmap of target tag (rows) vs aligned source tag (columns), in percent."""
    rows = list(table)
    cols = sorted({c for r in rows for c in table[r]})
    m = np.array([[table[r].get(c, 0.0) for c in cols] for r in rows]) if rows else np.zeros((0, 0))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.6 * len(cols) + 2.0, 0.5 * len(rows) + 1.5))
        if not m.size:
            ax.text(0.5, 0.5, "no aligned tokens", ha="center", va="center", transform=ax.transAxes)
            return _save(fig, path)
        im = ax.imshow(m, cmap="Blues", vmin=0, vmax=100, aspect="auto")
        ax.set_xticks(range(len(cols)), cols)
        ax.set_yticks(range(len(rows)), rows)
        ax.set_xlabel("source tag")
        ax.set_ylabel("target tag")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, f"{m[i, j]:.0f}", ha="center", va="center", fontsize=7,
                        color="white" if m[i, j] > 60 else "black")
        fig.colorbar(im, ax=ax, label="%")
        return _save(fig, path)


def attention_figure(matrix: np.ndarray, path, src_tokens: Sequence[str] | None = None,
                     tgt_tokens: Sequence[str] | None = None) -> Path:
    """Attention heatmap, target positions down, source positions across."""
    matrix = np.asarray(matrix)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.35 * matrix.shape[1] + 1.5, 0.35 * matrix.shape[0] + 1.2))
        ax.imshow(matrix, cmap="Greys", vmin=0, vmax=1, aspect="equal")
        if src_tokens is not None:
            ax.set_xticks(range(len(src_tokens)), src_tokens, rotation=90)
        if tgt_tokens is not None:
            ax.set_yticks(range(len(tgt_tokens)), tgt_tokens)
        ax.xaxis.tick_top()
        return _save(fig, path)


def metric_bar_figure(values: Mapping[str, float], path, ylabel: str) -> Path:
    """One bar per named value (for example per-seed or per-variant rates)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(values)
        ax.bar(range(len(names)), [values[n] for n in names], width=0.6, color="#55a868")
        ax.set_xticks(range(len(names)), names)
        ax.set_ylabel(ylabel)
        ax.spines[["top", "right"]].set_visible(False)
        return _save(fig, path)

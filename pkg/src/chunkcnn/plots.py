"""PNG renderings of the analysis reports.

Figures are drawn on a bare ``Figure`` with the Agg canvas, so nothing here
touches pyplot state or needs a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
FIGSIZE = (4.5, 3.0)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    return path


def _new():
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=FIGSIZE)
        ax = fig.add_subplot()
    return fig, ax


def plot_dcf_vs_short_segments(rows: Sequence[tuple[str, float, int]], path) -> Path:
    """Per-file DCF (%) against the number of reference segments under 0.2 s."""
    with matplotlib.rc_context(STYLE):
        fig, ax = _new()
        ax.scatter([r[2] for r in rows], [100 * r[1] for r in rows], s=14, color="tab:blue")
        ax.set_xlabel("short reference segments (< 0.2 s)")
        ax.set_ylabel("DCF (%)")
        ax.set_ylim(bottom=0)
        return _save(fig, path)


def plot_accuracy_vs_train_duration(rows, path) -> Path:
    """Top-5 accuracy per speaker against that speaker's training seconds."""
    rows = [r for r in rows if r[3] is not None]
    with matplotlib.rc_context(STYLE):
        fig, ax = _new()
        ax.scatter([r[1] for r in rows], [100 * r[3] for r in rows], s=14, color="tab:green")
        for spk, secs, _, acc in rows:
            ax.annotate(spk, (secs, 100 * acc), fontsize=6, xytext=(2, 2), textcoords="offset points")
        ax.set_xlabel("training audio (s)")
        ax.set_ylabel("top-5 accuracy (%)")
        ax.set_ylim(0, 105)
        return _save(fig, path)


def plot_hit_miss_by_duration(rows, path) -> Path:
    """Stacked hit and miss rates for each test-duration bin."""
    labels = [r[0] for r in rows]
    hits = [100 * r[1] if r[1] is not None else 0.0 for r in rows]
    misses = [100 * r[2] if r[2] is not None else 0.0 for r in rows]
    x = range(len(rows))
    with matplotlib.rc_context(STYLE):
        fig, ax = _new()
        ax.bar(x, hits, color="tab:blue", label="hit")
        ax.bar(x, misses, bottom=hits, color="tab:red", label="miss")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_xlabel("test utterance duration (s)")
        ax.set_ylabel("rate (%)")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_training_history(history, path) -> Path:
    with matplotlib.rc_context(STYLE):
        fig, ax = _new()
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.train_loss for r in history], marker="o", ms=3, label="train")
        ax.plot(epochs, [r.val_loss for r in history], marker="s", ms=3, label="validation")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.legend()
        return _save(fig, path)

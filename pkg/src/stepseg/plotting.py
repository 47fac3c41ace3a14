"""Static segmentation timelines and report figures."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import BACKGROUND, Segmentation  # noqa: E402

ROW_HEIGHT = 0.6


def step_colors(n_steps: int):
    cmap = plt.get_cmap("tab20" if n_steps > 10 else "tab10")
    return [cmap(j % cmap.N) for j in range(n_steps)]


def timeline(
    rows: Sequence[tuple[str, Segmentation]],
    step_names: Sequence[str] | None = None,
    title: str | None = None,
    ax=None,
):
    """One horizontal bar row per system; steps colored, background unfilled.

    Every region becomes one rectangle, so widths in a row sum to T.
    """
    n_steps = len(step_names) if step_names is not None else 1 + max(
        (l for _, seg in rows for l in seg.labels), default=0
    )
    colors = step_colors(max(n_steps, 1))
    if ax is None:
        T = max(seg.T for _, seg in rows)
        fig, ax = plt.subplots(figsize=(min(16, 4 + T / 20), 0.5 + 0.45 * len(rows)))
    else:
        fig = ax.figure
    for i, (name, seg) in enumerate(rows):
        y = len(rows) - 1 - i
        left = 0
        for label, d in seg.regions:
            if label == BACKGROUND:
                ax.barh(y, d, left=left, height=ROW_HEIGHT, facecolor="none", edgecolor="0.85", linewidth=0.3)
            else:
                ax.barh(y, d, left=left, height=ROW_HEIGHT, color=colors[label], edgecolor="none")
            left += d
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([name for name, _ in rows][::-1])
    ax.set_xlim(0, max(seg.T for _, seg in rows))
    ax.set_xlabel("time (s)")
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    if title:
        ax.set_title(title, fontsize=9)
    if step_names is not None:
        used = sorted({l for _, seg in rows for l in seg.labels if l != BACKGROUND})
        handles = [plt.Rectangle((0, 0), 1, 1, color=colors[l]) for l in used]
        if handles:
            ax.legend(handles, [step_names[l] for l in used], fontsize=6, loc="upper left",
                      bbox_to_anchor=(1.0, 1.0), frameon=False)
    fig.tight_layout()
    return fig


def save_timeline(path, rows, step_names=None, title=None) -> Path:
    fig = timeline(rows, step_names, title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def metrics_figure(per_task: Mapping[str, Mapping[str, float]], metrics: Sequence[str], path) -> Path:
    """Grouped bars of each metric per task."""
    tasks = sorted(per_task)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(tasks), 1)
    fig, ax = plt.subplots(figsize=(7, 3))
    for i, task in enumerate(tasks):
        vals = [per_task[task][m] for m in metrics]
        ax.bar(x + i * width, np.nan_to_num(vals), width, label=task)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([m.replace("_", " ") for m in metrics], fontsize=7, rotation=15)
    ax.set_ylim(0, 100)
    if len(tasks) <= 10:
        ax.legend(fontsize=6, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path

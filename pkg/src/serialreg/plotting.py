"""Matplotlib figures for evaluation reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

PANELS = (
    ("distance_um", "Centre distance (um)"),
    ("box_iou", "Box IoU"),
    ("circle_iou", "Circle IoU"),
)


def plot_metric_distributions(rows_by_method: Mapping[str, Sequence[dict]], path) -> Path:
    """One box plot panel per metric, one box per method."""
    path = Path(path)
    methods = list(rows_by_method)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(3.2 * 3, 3.0))
        for ax, (key, title) in zip(axes, PANELS):
            data = [[r[key] for r in rows_by_method[m]] or [np.nan] for m in methods]
            ax.boxplot(data, showfliers=True)
            ax.set_xticks(range(1, len(methods) + 1), methods, rotation=20)
            for i, vals in enumerate(data, start=1):
                ax.scatter(np.full(len(vals), i) + np.linspace(-0.12, 0.12, len(vals)), vals,
                           s=6, alpha=0.5, color="tab:blue")
            ax.set_title(title)
            if key != "distance_um":
                ax.set_ylim(-0.02, 1.02)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_distance_by_section(rows: Sequence[dict], path) -> Path:
    """Mean centre distance per section index; error grows away from the middle."""
    path = Path(path)
    by_section: dict[int, list[float]] = defaultdict(list)
    for r in rows:
        by_section[int(r["section_index"])].append(float(r["distance_um"]))
    idx = sorted(by_section)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(idx, [np.mean(by_section[i]) for i in idx], "o-", color="tab:green")
        ax.set_xlabel("section index")
        ax.set_ylabel("mean centre distance (um)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path

"""Line-oriented reports and SVG figures.

Reports are plain key=value text. Figures are rendered with matplotlib
to SVG with a pinned hash salt and no embedded date, so rerunning a
seeded command reproduces the files byte for byte.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "vididi"

import matplotlib.pyplot as plt
import numpy as np

_SAVE_OPTS = {"format": "svg", "metadata": {"Date": None}}


def write_report(path: str | Path, values: dict) -> None:
    lines = [f"{key}={_fmt(v)}" for key, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def loss_curve(path: str | Path, steps, losses, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def scatter2d(path: str | Path, coords: np.ndarray, labels: np.ndarray, title: str = "embedding map") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for cls in np.unique(labels):
        mask = labels == cls
        ax.scatter(coords[mask, 0], coords[mask, 1], s=14, label=f"class {cls}")
    ax.set_title(title)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def compare_bars(
    path: str | Path,
    schedules: list[str],
    means: dict[str, list[float]],
    sds: dict[str, list[float]],
    title: str = "retrieval recall@1",
) -> None:
    """Grouped bars: one group per metric key, one bar per schedule."""
    metrics = list(means)
    x = np.arange(len(metrics), dtype=float)
    width = 0.8 / max(1, len(schedules))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, sched in enumerate(schedules):
        vals = [means[m][i] for m in metrics]
        errs = [sds[m][i] for m in metrics]
        ax.bar(x + i * width, vals, width, yerr=errs, capsize=3, label=sched)
    ax.set_xticks(x + width * (len(schedules) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("recall@1")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)

"""Static SVG line charts for loss curves and benchmark scaling."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "ssmgesture"
import matplotlib.pyplot as plt  # noqa: E402


def line_chart(series: dict[str, tuple[list, list]], path: str | Path, title: str = "",
               xlabel: str = "", ylabel: str = "", logx: bool = False, logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o" if len(xs) < 30 else None, label=name)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

"""Line, scatter and histogram figures written as byte-stable SVG."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "mmilab"
matplotlib.rcParams["svg.fonttype"] = "none"
matplotlib.rcParams["path.simplify"] = False

_META = {"Date": None, "Creator": "mmilab"}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def line_plot(path, x, series: Dict[str, Sequence[Optional[float]]], xlabel: str, ylabel: str,
              title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    x = np.asarray(x, dtype=float)
    for name, ys in series.items():
        y = np.array([np.nan if v is None else v for v in ys], dtype=float)
        ok = ~np.isnan(y)
        if ok.any():
            ax.plot(x[ok], y[ok], marker="." if ok.sum() < len(y) else None, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def twin_plot(path, x, left: Dict[str, Sequence], right: Dict[str, Sequence], xlabel: str,
              left_label: str, right_label: str, title: str = "") -> None:
    """Criterion on the left axis against WER curves on the right."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax2 = ax.twinx()
    x = np.asarray(x, dtype=float)
    handles = []
    colours = iter(plt.rcParams["axes.prop_cycle"].by_key()["color"])
    for axis, group in ((ax, left), (ax2, right)):
        for name, ys in group.items():
            y = np.array([np.nan if v is None else v for v in ys], dtype=float)
            ok = ~np.isnan(y)
            if ok.any():
                (h,) = axis.plot(x[ok], y[ok], label=name, color=next(colours),
                                 linestyle="-" if axis is ax else "--")
                handles.append(h)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(left_label)
    ax2.set_ylabel(right_label)
    if title:
        ax.set_title(title)
    if handles:
        ax.legend(handles=handles, loc="best")
    fig.tight_layout()
    _save(fig, path)


def scatter_plot(path, clouds: Dict[str, Sequence], xlabel: str, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    for name, pts in clouds.items():
        p = np.asarray(pts, dtype=float).reshape(-1, 2)
        ax.scatter(p[:, 0], p[:, 1], s=14, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.axhline(0, color="0.7", lw=0.5)
    ax.axvline(0, color="0.7", lw=0.5)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def histogram(path, values, xlabel: str, title: str = "", bins: int = 20) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(np.asarray(values, dtype=float), bins=bins, color="0.4")
    ax.axvline(0, color="r", lw=0.8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)

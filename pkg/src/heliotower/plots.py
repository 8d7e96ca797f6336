"""Figure rendering for CLI reports.

matplotlib is imported only here, so the core library stays free of any
rendering dependency; every figure goes straight to a file.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .layout import FieldLayout
from .optimize import OptResult

_SAVE_KW = {"dpi": 144, "metadata": {"Software": None}}


def plot_layout(layout: FieldLayout, path) -> None:
    """Field map: selected heliostats in colour, rejected ones in grey."""
    fig, ax = plt.subplots(figsize=(7.5, 7.5))
    sel = layout.selected
    if (~sel).any():
        ax.scatter(layout.x[~sel], layout.y[~sel], s=6, c="0.75", label="rejected")
    ax.scatter(layout.x[sel], layout.y[sel], s=6, c="#1a7f37", label="selected")
    ax.scatter([0.0], [0.0], marker="^", s=90, c="#c01616", label="tower")
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", frameon=False)
    ax.set_title(f"{int(sel.sum())} selected of {len(layout)} generated")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_convergence(results: Mapping[str, OptResult], path) -> None:
    """Running best objective versus evaluation count, one line per algorithm."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for name, result in results.items():
        f_vals = np.array([f for _, f in result.trace])
        running = np.minimum.accumulate(np.where(np.isfinite(f_vals), f_vals, np.inf))
        finite = np.isfinite(running)
        ax.plot(np.arange(1, f_vals.size + 1)[finite], running[finite], label=name)
    ax.set_xlabel("objective evaluations")
    ax.set_ylabel("best objective so far")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_correlations(rho: np.ndarray, names: Sequence[str], path) -> None:
    """Heat map of the correlation matrix."""
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    im = ax.imshow(rho, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(names)), labels=names, rotation=60, ha="right")
    ax.set_yticks(range(len(names)), labels=names)
    fig.colorbar(im, ax=ax, label="correlation")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)

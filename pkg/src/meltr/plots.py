"""Figures rendered next to the trace CSVs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_sweeps(rows, task_names, path: Path) -> Path:
    """Output and partial against each task's loss value."""
    fig, (ax_out, ax_grad) = plt.subplots(1, 2, figsize=(9, 3.6))
    rows = np.asarray(rows, dtype=float)
    for t, name in enumerate(task_names):
        sel = rows[rows[:, 0] == t]
        ax_out.plot(sel[:, 1], sel[:, 2], label=name)
        ax_grad.plot(sel[:, 1], sel[:, 3], label=name)
    ax_out.set(xlabel="task loss", ylabel="combined loss", title="output sweep")
    ax_grad.set(xlabel="task loss", ylabel="partial", title="partial sweep")
    ax_grad.legend(fontsize=7)
    return _save(fig, path)


def plot_surface(va, vb, grid, names: tuple[str, str], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.contourf(vb, va, grid, levels=20)
    fig.colorbar(im, ax=ax)
    ax.set(xlabel=f"{names[1]} loss", ylabel=f"{names[0]} loss", title="combined loss surface")
    return _save(fig, path)


def plot_partials(partials, task_names, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    p = np.asarray(partials, dtype=float)
    for t, name in enumerate(task_names):
        ax.plot(np.arange(len(p)), p[:, t], marker=".", label=name)
    ax.set(xlabel="epoch", ylabel="mean partial", title="per-task weight trace")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_loss_ranges(stats, task_names, path: Path) -> Path:
    """Box-style plot from five-number summaries."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    boxes = [
        {"whislo": s[0], "q1": s[1], "med": s[2], "q3": s[3], "whishi": s[4], "label": name}
        for s, name in zip(stats, task_names)
    ]
    ax.bxp(boxes, showfliers=False)
    ax.set(ylabel="per-sample loss", title="loss range per task")
    ax.tick_params(axis="x", labelsize=7)
    return _save(fig, path)

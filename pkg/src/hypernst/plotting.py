"""Matplotlib figures written next to the CSV reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_losses(rows: list[dict], path) -> Path:
    """Loss curves per column, stage boundary marked."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if rows:
        steps = np.array([int(r["step"]) for r in rows])
        for col in ("l_rec", "l_disc_g", "l_pcd_g", "total"):
            vals = np.array([float(r[col]) for r in rows])
            if np.all(vals == 0):
                continue
            ax.plot(steps, vals, label=col, lw=0.8)
        stage2 = [int(r["step"]) for r in rows if int(r["stage"]) == 2]
        if stage2:
            ax.axvline(stage2[0], color="k", ls="--", lw=0.6)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_grid_metrics(rows: list[dict], path) -> Path:
    """Perceptual distance vs SIFID scatter over evaluated pairs."""
    fig, ax = plt.subplots(figsize=(5, 4))
    x = [float(r["lpips_like"]) for r in rows]
    y = [float(r["sifid"]) for r in rows]
    ax.scatter(x, y, s=12)
    ax.set_xlabel("perceptual distance to content")
    ax.set_ylabel("SIFID to style")
    return _save(fig, path)


def plot_ablation(rows: list[dict], param: str, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    labels = [str(r[param]) for r in rows]
    pos = np.arange(len(rows))
    for ax, col in zip(axes, ("lpips_like", "sifid")):
        ax.bar(pos, [float(r[col]) for r in rows])
        ax.set_xticks(pos, labels)
        ax.set_xlabel(param)
        ax.set_ylabel(col)
    return _save(fig, path)

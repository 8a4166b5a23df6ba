"""Matplotlib figures for run reports. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "apt-lab",
}


def _figure(width: float = 6.0, ratio: float = 0.62, ncols: int = 1):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, ncols, figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        # drop timestamps and version stamps so identical inputs give identical files
        metadata = {"Software": None} if path.suffix == ".png" else {"Date": None, "Creator": None}
        fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)
    return path


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if len(values) < window or window <= 1:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_curves(logs: dict[str, list[dict]], path: Path, threshold: float | None = None,
                smooth: int = 20) -> Path:
    """Discriminator GAN loss (d_real + d_fake) per run; draws the collapse threshold when given."""
    fig, ax = _figure()
    for name, records in logs.items():
        rec = [r for r in records if r.get("d_real") is not None]
        if not rec:
            continue
        steps = np.array([r["step"] for r in rec])
        gan = np.array([r["d_real"] + r["d_fake"] for r in rec])
        y = _smooth(gan, smooth)
        ax.plot(steps[len(steps) - len(y):], y, lw=1.0, label=name)
    if threshold is not None:
        ax.axhline(threshold, color="k", ls="--", lw=0.8, label="collapse threshold", gid="collapse-threshold")
    ax.axhline(2 * np.log(2), color="0.6", ls=":", lw=0.8, label="balanced (2 log 2)")
    ax.set_xlabel("update")
    ax.set_ylabel("d_real + d_fake")
    ax.set_yscale("symlog", linthresh=0.05)
    ax.legend(loc="best", frameon=False)
    return _save(fig, path)


def training_loss(records: list[dict], path: Path, smooth: int = 50) -> Path:
    fig, ax = _figure()
    y = np.array([r["g_loss"] for r in records if r.get("g_loss") is not None])
    ax.plot(np.arange(len(_smooth(y, smooth))), _smooth(y, smooth), lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (moving average)")
    ax.set_yscale("log")
    return _save(fig, path)


def scatter_overlay(real: np.ndarray, panels: dict[str, np.ndarray], path: Path, lim: float = 1.6) -> Path:
    """One panel per generated set, each drawn over the real samples."""
    fig, axes = _figure(width=2.4 * len(panels), ratio=1.0 / len(panels), ncols=len(panels))
    axes = np.atleast_1d(axes)
    for ax, (name, pts) in zip(axes, panels.items()):
        ax.scatter(real[:, 0], real[:, 1], s=1, c="0.75", lw=0, rasterized=True)
        ax.scatter(pts[:, 0], pts[:, 1], s=1, c="C3", lw=0, rasterized=True)
        ax.set_title(name)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def traversal_strip(traversals: dict[str, np.ndarray], path: Path, real: np.ndarray | None = None,
                    lim: float = 1.6) -> Path:
    """2D traversal paths, colored by frame index."""
    fig, axes = _figure(width=2.6 * len(traversals), ratio=1.0 / len(traversals), ncols=len(traversals))
    axes = np.atleast_1d(axes)
    for ax, (name, frames) in zip(axes, traversals.items()):
        if real is not None:
            ax.scatter(real[:, 0], real[:, 1], s=1, c="0.8", lw=0, rasterized=True)
        pts = frames.reshape(len(frames), -1)[:, :2]
        ax.plot(pts[:, 0], pts[:, 1], c="0.4", lw=0.6)
        ax.scatter(pts[:, 0], pts[:, 1], c=np.linspace(0, 1, len(pts)), cmap="viridis", s=8)
        ax.set_title(name)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def probe_mse(mse: Sequence[float], path: Path) -> Path:
    fig, ax = _figure(width=4.5)
    layers = np.arange(1, len(mse) + 1)
    ax.plot(layers, mse, marker="o", ms=3)
    ax.set_xlabel("block")
    ax.set_ylabel("probe MSE to final prediction")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xticks(layers)
    return _save(fig, path)

"""Matplotlib figures written next to the CSV tables.

All figures go through :func:`save` so the SVG output is reproducible
(no timestamp, fixed id salt).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from hcontrol.densities import CHECKERBOARD_CENTERS  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "hcontrol",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def toy_scatter(points, path, title="", y_obs=None, modes=(), max_points=5000):
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    for cx, cy in CHECKERBOARD_CENTERS:
        ax.add_patch(Rectangle((cx - 0.5, cy - 0.5), 1, 1, color="0.9", lw=0))
    for m in modes:
        cx, cy = CHECKERBOARD_CENTERS[m]
        ax.add_patch(Rectangle((cx - 0.5, cy - 0.5), 1, 1, fill=False, ec="tab:red", lw=1.2))
    pts = np.asarray(points)[:max_points]
    ax.scatter(pts[:, 0], pts[:, 1], s=1.5, c="k", alpha=0.4, lw=0)
    if y_obs is not None:
        ax.axvline(y_obs, color="tab:blue", lw=0.8, ls="--")
    ax.set_xlim(-2.6, 2.6)
    ax.set_ylim(-2.6, 2.6)
    ax.set_aspect("equal")
    ax.set_title(title)
    return save(fig, path)


def hit_vs_nfe(curves, path, title="posterior-hit vs NFE"):
    """``curves`` maps a label to ``(nfe, mean, std)`` arrays."""
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for label, (nfe, mean, std) in curves.items():
        ax.errorbar(nfe, mean, yerr=std, marker="o", ms=3, capsize=2, label=label)
    ax.set_xlabel("total NFE")
    ax.set_ylabel("posterior-hit rate")
    ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def delta_bands(band_traces, path):
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for label, trace in band_traces.items():
        j = np.arange(1, len(trace) + 1)
        ax.plot(j, trace, marker=".", label=f"sigma in {label}")
    ax.set_xlabel("inner iteration j")
    ax.set_ylabel("mean |Delta_W|")
    ax.legend(frameon=False)
    return save(fig, path)


def rho_heatmap(rho, path, title=""):
    n = rho.shape[0]
    fig, ax = plt.subplots(figsize=(2.6, 2.6))
    ax.imshow(rho, cmap="gray_r", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_title(title)
    return save(fig, path)


def eta_curves(curves, path):
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for label, eta in curves.items():
        ax.plot(np.arange(len(eta)), eta, marker="o", ms=3, label=label)
    ax.set_xlabel("r")
    ax.set_ylabel("eta(r)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False, fontsize=7)
    return save(fig, path)


def loss_curve(losses, path, smooth=200):
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    losses = np.asarray(losses)
    ax.plot(losses, lw=0.3, color="0.7")
    if len(losses) > smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(losses)), np.convolve(losses, kernel, "valid"), color="k", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    return save(fig, path)

"""SVG figures for evaluation reports.

Output is byte-stable across runs: the SVG id salt is fixed and the date
metadata is dropped.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_SALT = "rasio"


def _save(fig, path) -> Path:
    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_errors(per_length: dict, path) -> Path:
    """Translation and rotation error against segment length."""
    lengths = sorted(per_length)
    t = [per_length[L]["translation_pct"] for L in lengths]
    r = [per_length[L]["rotation_deg_per_100m"] for L in lengths]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(lengths, t, "o-")
    a.set_xlabel("segment length [m]")
    a.set_ylabel("translation error [%]")
    b.plot(lengths, r, "o-", color="tab:red")
    b.set_xlabel("segment length [m]")
    b.set_ylabel("rotation error [deg/100 m]")
    for ax in (a, b):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_trajectory(est: np.ndarray, gt: np.ndarray, path, points: np.ndarray | None = None,
                    gt_map: np.ndarray | None = None) -> Path:
    """Top view of estimated and true paths, optionally over the maps."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    if gt_map is not None and len(gt_map):
        ax.scatter(gt_map[:, 0], gt_map[:, 1], s=12, marker="x", color="0.4", label="true landmarks")
    if points is not None and len(points):
        ax.scatter(points[:, 0], points[:, 1], s=2, color="tab:orange", alpha=0.4, label="map")
    ax.plot(gt[:, 0], gt[:, 1], "k-", lw=1.2, label="ground truth")
    ax.plot(est[:, 0], est[:, 1], "-", color="tab:blue", lw=1.2, label="estimate")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)

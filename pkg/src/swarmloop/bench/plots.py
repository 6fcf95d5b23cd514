"""Report figures rendered alongside the delimited outputs."""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_trajectories(estimates: Dict[int, list], truth: Dict[int, list], path) -> None:
    """Top-down view: estimated (solid) vs ground-truth (dashed) per robot."""
    fig, ax = plt.subplots(figsize=(7, 6))
    colors = plt.cm.tab10.colors
    for r in sorted(truth):
        c = colors[r % len(colors)]
        tx = [p.t[0] for _, p in truth[r]]
        ty = [p.t[1] for _, p in truth[r]]
        ax.plot(tx, ty, "--", color=c, alpha=0.5, label=f"robot {r} truth")
        if r in estimates:
            ex = [p.t[0] for _, p in estimates[r]]
            ey = [p.t[1] for _, p in estimates[r]]
            ax.plot(ex, ey, "-", color=c, label=f"robot {r} estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_metric_bars(rows: Sequence[dict], key: str, path, ylabel: str = "ATE [m]") -> None:
    """Bar chart of ate_m grouped by one config axis (e.g. formulation)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [str(r[key]) for r in rows]
    ax.bar(labels, [r["ate_m"] for r in rows], color="tab:blue")
    ax.set_ylabel(ylabel)
    ax.set_xlabel(key)
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_sparsification(rows: Sequence[dict], path) -> None:
    """ATE and total bandwidth against keyframe stride."""
    strides = [r["stride"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(strides, [r["ate_m"] for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("keyframe stride")
    ax1.set_ylabel("ATE [m]", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(strides, [r["bytes_total"] / 1e6 for r in rows], "s--", color="tab:orange")
    ax2.set_ylabel("bandwidth [MB]", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

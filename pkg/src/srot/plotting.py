"""SVG rendering of plans, flow traces and label-propagation sweeps.

Files are written without timestamps and with a fixed hash salt so that
re-running a command reproduces them byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "srot"

SEGMENT_BUDGET = 100_000
CULL_OPACITY = 0.01

_MARKERS = {"clean": "o", "TypeI": "x", "TypeII": "^"}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plan_segments(P, budget: int = SEGMENT_BUDGET):
    """Segment indices and opacities ``P_ij / max P``.

    Zero entries are skipped. Above ``budget`` candidate segments, those
    below 1% opacity are dropped; the second value reports whether that
    happened.
    """
    P = np.asarray(P, dtype=np.float64)
    top = P.max() if P.size else 0.0
    if top <= 0:
        return np.empty((0, 2), dtype=np.intp), np.empty(0), False
    alpha = P / top
    culled = P.size > budget
    keep = alpha >= CULL_OPACITY if culled else alpha > 0
    idx = np.argwhere(keep)
    return idx, alpha[keep], culled


def plot_plan(path, source_points, target_points, P, source_types=None, target_types=None,
              title: str = "") -> dict:
    """Scatter both supports and draw the plan as segments with opacity ``P_ij / max P``."""
    X = np.asarray(source_points)[:, :2]
    Z = np.asarray(target_points)[:, :2]
    idx, alpha, culled = plan_segments(P)
    fig, ax = plt.subplots(figsize=(6, 5))
    if idx.size:
        segs = np.stack([X[idx[:, 0]], Z[idx[:, 1]]], axis=1)
        colors = np.zeros((len(alpha), 4))
        colors[:, 3] = np.clip(alpha, 0.0, 1.0)
        ax.add_collection(LineCollection(segs, colors=colors, linewidths=0.8))
    for pts, types, color, side in ((X, source_types, "tab:blue", "source"),
                                    (Z, target_types, "tab:red", "target")):
        types = np.asarray(types if types is not None else ["clean"] * len(pts))
        for tag, marker in _MARKERS.items():
            sel = types == tag
            if sel.any():
                label = side if tag == "clean" else f"{side} {tag}"
                ax.scatter(pts[sel, 0], pts[sel, 1], s=18, c=color, marker=marker, label=label)
    if culled:
        ax.plot([], [], color="k", label=f"segments < {CULL_OPACITY:.0%} opacity hidden")
    ax.legend(loc="best", fontsize=7)
    ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    _save(fig, path)
    return {"segments": int(len(alpha)), "culled": bool(culled)}


def plot_traces(path, traces) -> None:
    """Evaluation distance and loss against iteration for several flows."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for t in traces:
        if t.eval_series:
            ax1.plot(t.eval_iters, t.eval_series, label=t.label)
        if t.loss_series:
            ax2.plot(np.arange(len(t.loss_series)), t.loss_series, label=t.label)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("W(alpha_c, beta_t)")
    ax1.set_yscale("log")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("loss")
    ax2.set_yscale("symlog", linthresh=1e-6)
    ax1.legend(fontsize=7)
    _save(fig, path)


def plot_flow_snapshots(path, alpha_points, trace, max_panels: int = 4) -> None:
    """A few snapshots of a flow on top of the fixed measure."""
    iters = trace.snapshot_iters
    pick = np.unique(np.linspace(0, len(iters) - 1, min(max_panels, len(iters))).astype(int))
    fig, axes = plt.subplots(1, len(pick), figsize=(3.2 * len(pick), 3.2), squeeze=False)
    A = np.asarray(alpha_points)
    for ax, k in zip(axes[0], pick):
        Z = trace.snapshots[k]
        ax.scatter(A[:, 0], A[:, 1], s=4, c="tab:blue")
        ax.scatter(Z[:, 0], Z[:, 1], s=4, c="tab:red")
        ax.set_title(f"{trace.label} t={iters[k]}", fontsize=8)
        ax.set_aspect("equal", adjustable="datalim")
    _save(fig, path)


def plot_labelprop(path, rows) -> None:
    """Accuracy and labeled accuracy against transported mass, one line per method."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)
    for meth in methods:
        sel = sorted((r for r in rows if r.method == meth), key=lambda r: r.m)
        ms = [r.m for r in sel]
        ax1.plot(ms, [r.accuracy for r in sel], marker="o", label=meth)
        ax2.plot(ms, [np.nan if r.labeled_accuracy is None else r.labeled_accuracy for r in sel],
                 marker="o", label=meth)
    ax1.set_xlabel("transported mass")
    ax1.set_ylabel("accuracy")
    ax2.set_xlabel("transported mass")
    ax2.set_ylabel("labeled accuracy")
    ax1.legend(fontsize=7)
    _save(fig, path)

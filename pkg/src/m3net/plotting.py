"""Report figures: grouping heatmaps, training curves, per-epoch cost, ablations.

PNG figures go through matplotlib (Agg backend, no display needed). The
grouping heatmap is also written as standalone SVG text, which needs nothing
beyond this module.
"""

from __future__ import annotations

import html
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

COOL = (59, 76, 192)
MID = (221, 221, 221)
WARM = (180, 4, 38)


def report_style():
    plt.rcParams.update({
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "axes.linewidth": 0.8,
        "figure.dpi": 100,
        "savefig.dpi": 150,
        "savefig.bbox": "tight",
    })


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def diverging_color(value: float, scale: float) -> tuple[int, int, int]:
    """Cool for negative, warm for positive, a light grey at zero."""
    if scale <= 0:
        return MID
    t = max(-1.0, min(1.0, value / scale))
    end = WARM if t > 0 else COOL
    a = abs(t)
    return tuple(int(round(m + (e - m) * a)) for m, e in zip(MID, end))


def heatmap_svg(G: np.ndarray, title: str = "", cell: int = 12) -> str:
    """Nodes down the rows, groups across the columns."""
    G = np.asarray(G, dtype=np.float64)
    n, g = G.shape
    scale = float(np.max(np.abs(G))) if G.size else 0.0
    left, top, bar = 48, 28 if title else 8, 16
    width = left + g * cell + 24 + bar + 60
    height = top + n * cell + 28
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{left}" y="16">{html.escape(title)}</text>')
    for i in range(n):
        for j in range(g):
            r, gg, b = diverging_color(G[i, j], scale)
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="rgb({r},{gg},{b})"><title>node {i}, group {j}: '
                       f'{G[i, j]:.6g}</title></rect>')
    out.append(f'<text x="{left + g * cell / 2}" y="{top + n * cell + 20}" '
               f'text-anchor="middle">group</text>')
    out.append(f'<text x="12" y="{top + n * cell / 2}" text-anchor="middle" '
               f'transform="rotate(-90 12 {top + n * cell / 2})">node</text>')
    bx = left + g * cell + 24
    steps = 32
    for k in range(steps):
        v = scale * (1 - 2 * k / (steps - 1))
        r, gg, b = diverging_color(v, scale)
        out.append(f'<rect x="{bx}" y="{top + k * n * cell / steps:.2f}" width="{bar}" '
                   f'height="{n * cell / steps + 0.5:.2f}" fill="rgb({r},{gg},{b})"/>')
    out.append(f'<text x="{bx + bar + 4}" y="{top + 8}">{scale:.3g}</text>')
    out.append(f'<text x="{bx + bar + 4}" y="{top + n * cell}">{-scale:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def grouping_heatmap(G: np.ndarray, path, title: str = ""):
    report_style()
    G = np.asarray(G)
    lim = float(np.max(np.abs(G))) or 1.0
    fig, ax = plt.subplots(figsize=(3.2, max(2.5, min(9.0, G.shape[0] * 0.03 + 1.5))))
    im = ax.imshow(G, aspect="auto", cmap="coolwarm", vmin=-lim, vmax=lim,
                   interpolation="nearest")
    ax.set_xlabel("group")
    ax.set_ylabel("node")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.08)
    return _save(fig, path)


def training_curves(history, path):
    report_style()
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(epochs, [r.train_loss for r in history], label="train loss (MAE)")
    ax.plot(epochs, [r.val_mae for r in history], label="val MAE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("vehicles")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.legend(frameon=False)
    return _save(fig, path)


def cost_per_epoch(history, path):
    """Wall time and peak resident memory per epoch."""
    report_style()
    epochs = [r.epoch for r in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
    a1.bar(epochs, [r.epoch_seconds for r in history], color="0.4")
    a1.set_xlabel("epoch")
    a1.set_ylabel("seconds")
    a2.plot(epochs, [r.peak_bytes / 2**20 for r in history], marker=".", color="C3")
    a2.set_xlabel("epoch")
    a2.set_ylabel("peak resident MiB")
    for ax in (a1, a2):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(rows, path):
    """``rows``: (variant, mae, rmse, mape) tuples."""
    report_style()
    names = [r[0] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(8, 2.6))
    for ax, col, label in zip(axes, (1, 2, 3), ("Avg. MAE", "Avg. RMSE", "Avg. MAPE (%)")):
        vals = [r[col] for r in rows]
        ax.bar(range(len(vals)), vals, color=["C3"] + ["0.55"] * (len(vals) - 1))
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_title(label)
        lo, hi = min(vals), max(vals)
        pad = (hi - lo) * 0.5 or abs(hi) * 0.05 or 1.0
        ax.set_ylim(lo - pad, hi + pad)
    fig.tight_layout()
    return _save(fig, path)

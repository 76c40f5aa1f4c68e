"""Figures written next to the JSON/CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale=1.0, ratio=None):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * (ratio or golden)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(report, path, title=None):
    """Loss and learning rate on top, per-layer gradient norms below."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_g) = plt.subplots(2, 1, figsize=figsize(1.0, 0.9), sharex=True)
        steps = np.arange(len(report.losses))
        ax.plot(steps, report.losses, lw=1.0, color="C0", label="train loss")
        ax.set_ylabel("loss (nats)")
        ax_lr = ax.twinx()
        ax_lr.plot(steps, report.lrs, lw=0.8, color="C3", ls="--", label="lr")
        ax_lr.set_ylabel("learning rate")
        ax_lr.spines["right"].set_visible(True)
        if report.layer_grad_norms:
            g = np.asarray(report.layer_grad_norms)
            for l in range(g.shape[1]):
                ax_g.plot(steps, g[:, l], lw=0.8, label=f"layer {l + 1}")
            ax_g.set_yscale("log")
            ax_g.legend(ncol=min(4, g.shape[1]), frameon=False)
        ax_g.set_xlabel("step")
        ax_g.set_ylabel("grad norm")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_sweep(result, path):
    """Mean perplexity per strategy with individual seeds overlaid, one group per pos mode."""
    table = result.table()
    names = list(table)
    modes = sorted({r.pos_mode for r in result.rows})
    width = 0.8 / max(1, len(modes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0 + 0.05 * len(names)))
        x = np.arange(len(names))
        for j, mode in enumerate(modes):
            means = [table[n].get(mode, {}).get("mean") or np.nan for n in names]
            ax.bar(x + j * width, means, width, label=mode, alpha=0.7)
            for i, n in enumerate(names):
                seeds = [v for v in table[n].get(mode, {}).get("seeds", {}).values() if v is not None]
                ax.plot([x[i] + j * width] * len(seeds), seeds, "k.", ms=3)
        ax.set_xticks(x + width * (len(modes) - 1) / 2)
        ax.set_xticklabels([f"{n}" for n in names], rotation=30, ha="right")
        ax.set_ylabel("test perplexity")
        finite = [r.perplexity for r in result.rows if r.status == "ok" and math.isfinite(r.perplexity)]
        if finite:
            lo, hi = min(finite), max(finite)
            pad = 0.1 * (hi - lo) + 1e-3
            ax.set_ylim(lo - pad - 0.5 * (hi - lo), hi + pad)
        ax.legend(frameon=False, title="pos mode")
        return _save(fig, path)


def plot_flops(table, path):
    """Stacked per-component forward FLOPs for baseline, reuse-one-layer and doubled depth."""
    rows = [k for k in ("baseline", "reuse_single_layer", "doubled_depth") if k in table]
    parts = ("attention", "mlp", "norms", "head")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        bottom = np.zeros(len(rows))
        for part in parts:
            vals = np.array([table[r][part] for r in rows])
            ax.bar(rows, vals, bottom=bottom, label=part)
            bottom += vals
        for i, r in enumerate(rows):
            ax.text(i, bottom[i], f"{table[r]['training']:.2e}", ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("forward FLOPs per sequence")
        ax.set_title("training FLOPs annotated")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_probe(entries, path, tokens=None):
    """Top-1 probability of each decoded intermediate state at every position."""
    grid = np.stack([e.top_probs[..., 0].reshape(-1, e.top_probs.shape[-2])[0].numpy() for e in entries])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.0, 0.5 + 0.04 * len(entries)))
        im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0, vmax=1)
        ax.set_yticks(range(len(entries)))
        ax.set_yticklabels([e.label for e in entries])
        ax.set_xlabel("position")
        if tokens is not None and len(tokens) <= 64:
            ax.set_xticks(range(len(tokens)))
            ax.set_xticklabels([chr(t) if 32 <= t < 127 else "·" for t in tokens], fontsize=6)
        fig.colorbar(im, ax=ax, label="top-1 probability")
        return _save(fig, path)

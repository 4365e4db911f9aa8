"""Figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    # keep files byte-stable across runs
    "svg.hashsalt": "mmim",
}
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[Mapping], path) -> Path:
    """Total and per-modality training loss against step, log-scaled."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["loss"] for r in rows], label="total", lw=1.2)
        multimodal = all(r.get("loss_oct") is not None and r.get("loss_ir") is not None for r in rows)
        if multimodal:
            for key in ("loss_oct", "loss_ir"):
                ax.plot(steps, [r[key] for r in rows], label=key[5:], lw=0.9)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("masked reconstruction loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_reconstruction(panels: Sequence[Dict[str, np.ndarray]], titles: Sequence[str], path) -> Path:
    """One row per input: original, masked view, reconstruction.

    Each panel dict holds ``original``, ``masked`` and ``recon`` arrays of
    shape ``(C, H, W)`` or ``(H, W)`` with values in [0, 1].
    """
    with plt.rc_context({**_STYLE, "axes.grid": False}):
        n = len(panels)
        fig, axes = plt.subplots(n, 3, figsize=(6, 2.1 * n), squeeze=False)
        for row, (panel, title) in enumerate(zip(panels, titles)):
            for col, key in enumerate(("original", "masked", "recon")):
                ax = axes[row, col]
                img = np.asarray(panel[key])
                img = img[0] if img.ndim == 3 else img
                ax.imshow(np.clip(img, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
                ax.set_xticks([])
                ax.set_yticks([])
                if row == 0:
                    ax.set_title(key)
            axes[row, 0].set_ylabel(title)
        return _save(fig, path)


def plot_metric_report(records: Sequence, path) -> Path:
    """Bar chart of seed means with sample-std error bars."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(records) + 1), 3))
        names = [r.name for r in records]
        means = [r.mean for r in records]
        stds = [0.0 if np.isnan(r.std) else r.std for r in records]
        ax.bar(names, means, yerr=stds, capsize=3, color="0.55")
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("score (mean over seeds)")
        return _save(fig, path)

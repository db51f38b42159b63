"""PNG figures for CLI reports: per-bin curves, layer sweeps and saliency heatmaps."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 100,
}
# keep files byte-stable across runs
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_bins(bins, path, title: str = "") -> Path:
    """BLEU and mean R_acc against difficulty bin, one panel each."""
    x = np.arange(1, len(bins) + 1)
    with plt.rc_context(STYLE):
        fig, (ax_b, ax_r) = plt.subplots(1, 2, figsize=(7.0, 2.8), constrained_layout=True)
        ax_b.plot(x, [b.bleu for b in bins], "o-", color="k")
        ax_b.set_ylabel("BLEU")
        ax_r.plot(x, [b.mean_r_acc for b in bins], "s-", color="tab:blue")
        ax_r.set_ylabel(r"mean $R_{acc}$")
        labels = [f"{i}\n{b.r_pi_min:.2f}-{b.r_pi_max:.2f}" for i, b in zip(x, bins)]
        for ax in (ax_b, ax_r):
            ax.set_xticks(x)
            ax.set_xticklabels(labels, fontsize=7)
            ax.set_xlabel(r"difficulty bin ($R_\pi$ range)")
            ax.set_ylim(-0.02, 1.02)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_layer_sweep(rows: Sequence[dict], path) -> Path:
    """Held-out BLEU (and ASR WER where present) against the auxiliary-loss layer.

    ``rows`` carry ``layer`` (None for the single-task baseline), ``bleu`` and
    optionally ``asr_wer``.
    """
    mtl = [r for r in rows if r["layer"] is not None]
    base = [r for r in rows if r["layer"] is None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0), constrained_layout=True)
        ax.plot([r["layer"] for r in mtl], [r["bleu"] for r in mtl], "o-", color="k", label="BLEU (MTL)")
        if base:
            ax.axhline(base[0]["bleu"], ls="--", color="0.5", label="BLEU (single task)")
        wer = [(r["layer"], r["asr_wer"]) for r in mtl if r.get("asr_wer") is not None]
        if wer:
            ax.plot(*zip(*wer), "s:", color="tab:red", label="ASR WER")
        ax.set_xlabel("auxiliary CTC layer")
        ax.set_xticks([r["layer"] for r in mtl])
        ax.legend(loc="best")
        return _save(fig, path)


def plot_heatmap(values: np.ndarray, path, xlabel: str = "layer", ylabel: str = "frame") -> Path:
    values = np.asarray(values, dtype=np.float64)
    with plt.rc_context(STYLE):
        h = max(2.0, 0.12 * values.shape[0] + 1.0)
        fig, ax = plt.subplots(figsize=(max(2.5, 0.35 * values.shape[1] + 1.5), h), constrained_layout=True)
        im = ax.imshow(values, aspect="auto", cmap="Greys", interpolation="nearest", vmin=0.0)
        ax.set_xticks(range(values.shape[1]))
        ax.set_xticklabels([str(j + 1) for j in range(values.shape[1])])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)

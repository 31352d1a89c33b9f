"""Optional figures rendered next to the CSV outputs (headless Agg backend)."""

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
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "figure.dpi": 120,
}

LOSS_TERMS = ("L", "L_u", "L_s", "L_c", "L_m")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if window <= 1 or values.size < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def plot_training_curves(rows: list[dict], path, window: int = 100) -> Path:
    """Per-step loss terms (thin) with their moving average (thick)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        steps = np.array([r["step"] for r in rows])
        for key in LOSS_TERMS:
            vals = np.array([r[key] for r in rows], dtype=float)
            if not np.isfinite(vals).any():
                continue
            (line,) = ax.plot(steps, vals, alpha=0.25, linewidth=0.6)
            smooth = moving_average(vals, window)
            ax.plot(steps[len(steps) - len(smooth):], smooth, color=line.get_color(), label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False, ncol=len(LOSS_TERMS))
        return _save(fig, path)


def plot_beta_sweep(rows: list[dict], path) -> Path:
    """WER per language and on average against the unsupervised weight."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        betas = [r["beta"] for r in rows]
        for key in [k for k in rows[0] if k.startswith("wer_")]:
            ax.plot(betas, [100 * r[key] for r in rows], marker="o", label=key[4:])
        ax.plot(betas, [100 * r["avg"] for r in rows], marker="s", color="k", label="avg")
        ax.set_xlabel("beta")
        ax.set_ylabel("WER (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_checkpoint_sweep(rows: list[dict], path) -> Path:
    """Pretraining L_u and post-finetune WER on twin axes over pretraining step."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        steps = [r["pretrain_step"] for r in rows]
        ax.plot(steps, [r["L_u"] for r in rows], marker="o", color="tab:blue")
        ax.set_xlabel("pretraining step")
        ax.set_ylabel("unsupervised loss", color="tab:blue")
        wer_ax = ax.twinx()
        wer_ax.plot(steps, [100 * r["avg_wer"] for r in rows], marker="s", color="tab:red")
        wer_ax.set_ylabel("finetuned WER (%)", color="tab:red")
        wer_ax.spines["right"].set_visible(True)
        return _save(fig, path)

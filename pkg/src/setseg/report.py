"""Figure rendering for the report-producing subcommands.

Figures are rendered to files next to the delimited (CSV/JSON) output; the
delimited files remain the machine-readable source of truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def spectrum_figure(rows, path) -> None:
    """Energy-ratio curve: per-component ratio and cumulative energy."""
    rows = np.asarray(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(rows[:, 0], np.maximum(rows[:, 1], 1e-16), lw=1.5,
                label="component energy ratio")
    ax2 = ax.twinx()
    ax2.plot(rows[:, 0], np.cumsum(rows[:, 1]), color="tab:orange", lw=1.5,
             label="cumulative")
    ax2.set_ylim(0, 1.02)
    ax.set_xlabel("component rank")
    ax.set_ylabel("energy ratio")
    ax2.set_ylabel("cumulative energy")
    ax.set_title("Mask component energy spectrum")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def recon_sweep_figure(dims, mean_ious, path) -> None:
    """Mean reconstruction IoU as a function of embedding dimension."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(dims, mean_ious, marker="o")
    ax.set_xlabel("embedding dimension")
    ax.set_ylabel("mean reconstruction IoU")
    ax.set_ylim(0, 1.02)
    ax.set_title("Reconstruction quality vs embedding dimension")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curve_figure(metrics, path) -> None:
    """Total loss per step, with a light moving average."""
    steps = [m["step"] for m in metrics]
    loss = np.array([m["loss"] for m in metrics])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, alpha=0.35, lw=0.8, label="loss")
    if len(loss) >= 20:
        win = max(5, len(loss) // 50)
        smooth = np.convolve(loss, np.ones(win) / win, mode="valid")
        ax.plot(steps[win - 1:], smooth, lw=1.5, label=f"moving avg ({win})")
    ax.set_xlabel("step")
    ax.set_ylabel("total set loss")
    ax.set_yscale("log")
    ax.set_title("Toy training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

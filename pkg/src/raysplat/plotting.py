"""Figures written next to the CSV/JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scenefit import moving_average  # noqa: E402

STYLE = {("fused", "fw"): ("tab:blue", "-"), ("fused", "bw"): ("tab:blue", "--"),
         ("naive", "fw"): ("tab:red", "-"), ("naive", "bw"): ("tab:red", "--")}


def plot_bench(rows, path, sweep_label: str = "sweep value") -> None:
    """Scratch bytes and median time against the sweep value, log-log."""
    fig, (ax_mem, ax_time) = plt.subplots(1, 2, figsize=(10, 4))
    for (mode, pass_), (color, ls) in STYLE.items():
        sel = [r for r in rows if r.mode == mode and r.pass_ == pass_]
        if not sel:
            continue
        x = [r.sweep for r in sel]
        label = f"{mode} {pass_}"
        ax_mem.plot(x, [r.scratch_bytes for r in sel], color=color, ls=ls, marker="o", label=label)
        refused = [r for r in sel if r.refused]
        if refused:
            ax_mem.scatter([r.sweep for r in refused], [r.scratch_bytes for r in refused],
                           marker="x", color="k", zorder=3)
        ok = [r for r in sel if not r.refused]
        if ok:
            ax_time.plot([r.sweep for r in ok], [r.time_ms_median for r in ok], color=color,
                         ls=ls, marker="o", label=label)
    for ax, ylabel in ((ax_mem, "peak scratch bytes"), (ax_time, "median time (ms)")):
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel(sweep_label)
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
    ax_mem.set_title("memory (x = refused, predicted)")
    ax_time.set_title("wall clock")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(losses, path, smooth: int = 25) -> None:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(losses) + 1), losses, color="0.7", lw=0.8, label="loss")
    if len(losses) >= smooth:
        ax.plot(np.arange(smooth, len(losses) + 1), moving_average(losses, smooth),
                color="tab:blue", label=f"{smooth}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

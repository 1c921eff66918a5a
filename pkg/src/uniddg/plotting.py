"""Matplotlib figures written next to the CSV/JSON outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from uniddg.losses import COMPONENTS  # noqa: E402

PANEL_TITLES = {
    "x": r"$x_i$",
    "recon": r"$x'_i$",
    "swap": r"$x'_{i\to\pi(i)}$",
    "random": r"$x'_{i\to rd}$",
}


def _to_rgb(t):
    arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
    if arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def plot_loss_curves(history, path):
    steps = [r["step"] for r in history]
    fig, axes = plt.subplots(2, 5, figsize=(15, 5.5), sharex=True)
    for ax, key in zip(axes.flat, COMPONENTS + ("total",)):
        ax.plot(steps, [r[key] for r in history], lw=1)
        ax.set_title(key, fontsize=10)
        ax.tick_params(labelsize=8)
    for ax in axes[-1]:
        ax.set_xlabel("step", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_recon_grid(panels, path, ids=None):
    """One row per image, one column per reconstruction family."""
    keys = [k for k in ("x", "recon", "swap", "random") if k in panels]
    n = panels["x"].shape[0]
    fig, axes = plt.subplots(n, len(keys), figsize=(2.0 * len(keys), 2.0 * n), squeeze=False)
    for i in range(n):
        for j, k in enumerate(keys):
            ax = axes[i, j]
            ax.imshow(_to_rgb(panels[k][i]))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(PANEL_TITLES[k], fontsize=10)
        if ids is not None:
            axes[i, 0].set_ylabel(ids[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_report(report, path):
    """Bar chart of the Dice row (percent) and ASSD row (pixels) per column."""
    cols = [c for c in report["columns"] if report["dice"].get(c) is not None
            and not np.isnan(report["dice"][c])]
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.1 * len(cols) + 2), 3.5))
    for ax, metric, label in ((axes[0], "dice", "Dice (%)"), (axes[1], "assd", "ASSD (pixel)")):
        vals = [report[metric].get(c, np.nan) for c in cols]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(range(len(cols)), vals, color="0.4")
        ax.set_xticks(range(len(cols)))
        ax.set_xticklabels(cols, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel(label)
    axes[0].set_ylim(0, 100)
    fig.suptitle(report["dice"]["Method"], fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)

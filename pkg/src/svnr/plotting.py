"""Figure rendering for the CLI report paths (schedule, training curves, time maps)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .schedule import Schedule  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})

SCHEME_COLORS = {"A": "tab:gray", "B1": "tab:green", "B2": "tab:olive",
                 "C1": "tab:cyan", "C2": "tab:orange", "C3": "tab:purple"}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_schedule(s: Schedule, path):
    """Std of the added noise for the standard and the variance exploding chains."""
    t = np.arange(s.T + 1)
    std_ddpm = np.sqrt(np.concatenate([[0.0], 1.0 - s.alpha_bar]))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(t, std_ddpm, label=r"standard $\sqrt{1-\bar\alpha_t}$")
    ax.plot(t, np.sqrt(s.gamma), label=r"VE $\sqrt{\gamma_t}$")
    ax.set_xlabel("t")
    ax.set_ylabel("noise std")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_training_curves(logs: dict, path, metric: str = "val_ssim"):
    """Validation metric vs. iteration, one line per scheme."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for scheme, rows in logs.items():
        it = [r["iter"] for r in rows if np.isfinite(r[metric])]
        val = [r[metric] for r in rows if np.isfinite(r[metric])]
        ax.plot(it, val, marker="o", ms=2.5, label=scheme, color=SCHEME_COLORS.get(scheme))
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric.replace("val_", "validation ").upper() if metric.endswith("psnr") else
                  metric.replace("val_", "validation "))
    ax.legend(frameon=False, ncol=3)
    _save(fig, path)


def save_heatmap(values: np.ndarray, path, cmap: str = "magma", vmax: float | None = None):
    """Render a 2-D map (e.g. a time map) as a colour PNG, one pixel per entry."""
    v = np.asarray(values, dtype=float)
    plt.imsave(path, v, cmap=cmap, vmin=0.0, vmax=vmax if vmax is not None else max(float(v.max()), 1e-12))


def plot_trace(frames: list, path, titles: list | None = None):
    """Row of sRGB frames from a reverse-diffusion trace."""
    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.8), squeeze=False)
    for i, (ax, img) in enumerate(zip(axes[0], frames)):
        ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[i], fontsize=8)
    _save(fig, path)

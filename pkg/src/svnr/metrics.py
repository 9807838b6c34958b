"""Image quality metrics and Monte-Carlo estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .noise_model import ImageGrid

PSNR_CAP = 99.0
SSIM_WINDOW = 8


def _arr(x):
    return x.data if isinstance(x, ImageGrid) else np.asarray(x, dtype=float)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP)


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` windows (stride 1) and channels.

    Window statistics use a uniform weight and population (1/N) moments;
    ``C1 = (0.01 peak)^2``, ``C2 = (0.03 peak)^2``.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_image: list = field(default_factory=list)


def evaluate(refs, outs, peak: float = 1.0) -> MetricReport:
    """Per-image PSNR/SSIM and their means over paired sequences of images."""
    rows = [(psnr(r, o, peak), ssim(r, o, peak)) for r, o in zip(refs, outs, strict=True)]
    if not rows:
        raise ValueError("no images to evaluate")
    p, s = np.mean(rows, axis=0)
    return MetricReport(float(p), float(s), [{"psnr": a, "ssim": b} for a, b in rows])


def _stack(samples):
    arr = np.stack([_arr(s) for s in samples]) if not isinstance(samples, np.ndarray) else samples
    if arr.shape[0] < 2:
        raise ValueError("need at least two samples")
    return arr


def empirical_moments(samples):
    """Per-element sample mean and unbiased variance along the first axis."""
    arr = _stack(samples)
    return arr.mean(axis=0), arr.var(axis=0, ddof=1)


def empirical_corr(u, v):
    """Per-element Pearson correlation along the first axis; NaN where either side is constant."""
    u, v = _stack(u), _stack(v)
    if u.shape != v.shape:
        raise ValueError("paired sequences differ in shape")
    du = u - u.mean(axis=0)
    dv = v - v.mean(axis=0)
    su = np.sqrt((du ** 2).sum(axis=0))
    sv = np.sqrt((dv ** 2).sum(axis=0))
    den = su * sv
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (du * dv).sum(axis=0) / den
    return np.where(den > 0, r, np.nan)

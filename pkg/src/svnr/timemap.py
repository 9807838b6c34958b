"""Per-pixel diffusion time maps.

A time map holds one real time per pixel (shared by the colour channels) such
that ``gamma_at(t)`` equals that pixel's noise variance in model-range units.
Maps are plain float arrays of shape ``(..., H, W)``.
"""

from __future__ import annotations

import numpy as np

from .noise_model import Domain, ImageGrid, NoiseParams, as_linear
from .schedule import Schedule, time_for_variance


def _linear_signal(img, domain: Domain) -> np.ndarray:
    if isinstance(img, ImageGrid):
        return as_linear(img)
    arr = np.asarray(img, dtype=float)
    if domain is Domain.MODEL:
        return (arr + 1.0) / 2.0
    if domain is Domain.LINEAR:
        return arr
    raise ValueError("time maps need a LINEAR or MODEL image")


def variance_to_timemap(var: np.ndarray, s: Schedule) -> np.ndarray:
    """Channel-max of a ``(..., H, W, C)`` model-range variance field, mapped to time."""
    return time_for_variance(s, np.max(var, axis=-1))


def true_timemap(x0, p: NoiseParams, s: Schedule, domain: Domain = Domain.MODEL) -> np.ndarray:
    """Time map induced by the clean image's actual noise level."""
    return variance_to_timemap(p.model_variance(_linear_signal(x0, domain)), s)


def estimated_variance(y, p: NoiseParams, domain: Domain = Domain.MODEL) -> np.ndarray:
    """Model-range noise variance estimated from the noisy image clipped to [0, 1] linear."""
    return p.model_variance(np.clip(_linear_signal(y, domain), 0.0, 1.0))


def estimate_timemap(y, p: NoiseParams, s: Schedule, domain: Domain = Domain.MODEL) -> np.ndarray:
    """Time map from the noisy image alone (clean signal replaced by clipped ``y``)."""
    return variance_to_timemap(estimated_variance(y, p, domain), s)


def advance(t: np.ndarray, k: float) -> np.ndarray:
    """Move every pixel ``k`` steps toward time zero, stopping at zero."""
    if k < 0:
        raise ValueError("cannot advance by a negative number of steps")
    return np.maximum(np.asarray(t, dtype=float) - k, 0.0)


def steps_needed(t: np.ndarray) -> int:
    """Number of unit reverse steps until every pixel reaches zero."""
    m = float(np.max(t)) if np.size(t) else 0.0
    return int(np.ceil(m)) if m > 0 else 0

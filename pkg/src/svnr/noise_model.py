"""Raw-sensor noise simulation and the sRGB / linear / model-range conversions."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GAMMA = 2.2


class Domain(enum.Enum):
    SRGB = "srgb"      # display-referred, [0, 1]
    LINEAR = "linear"  # sensor-linear, [0, inf)
    MODEL = "model"    # linear rescaled to [-1, 1]


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """H x W x C raster tagged with the domain it lives in."""

    data: np.ndarray
    domain: Domain

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[-1] not in (1, 3):
            raise ValueError(f"expected H x W x C with C in (1, 3), got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class NoiseParams:
    """Read / shot noise standard deviations.

    The per-pixel variance is ``sigma_r**2 + sigma_s**2 * x`` where ``x`` is the
    *linear* clean signal. When ``scaled`` is set, the standard deviations are
    expressed in model-range units (twice the linear ones) while the shot term
    still multiplies the linear signal, so every variance is exactly 4x.
    """

    sigma_r: float
    sigma_s: float
    label: str | None = None
    scaled: bool = False

    def __post_init__(self):
        for name in ("sigma_r", "sigma_s"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v!r}")

    def variance(self, x_linear):
        return self.sigma_r ** 2 + self.sigma_s ** 2 * np.asarray(x_linear, dtype=float)

    def model_variance(self, x_linear):
        """Variance in model-range units regardless of ``scaled``."""
        v = self.variance(x_linear)
        return v if self.scaled else 4.0 * v

    @property
    def is_noiseless(self) -> bool:
        return self.sigma_r == 0 and self.sigma_s == 0


@dataclass(frozen=True)
class GainPreset:
    name: str
    sigma_r: float
    sigma_s: float

    def params(self) -> NoiseParams:
        return NoiseParams(self.sigma_r, self.sigma_s, label=self.name)


# Illustrative only: a log-linear ramp over camera gain, NOT measured values.
# Real camera tables belong in a preset file passed with --presets.
BUILTIN_PRESETS = {
    f"gain{g}": GainPreset(f"gain{g}", round(0.0025 * g ** 0.9, 6), round(0.04 * g ** 0.5, 6))
    for g in (1, 2, 4, 8, 16, 20)
}


def _check_white_level(white_level):
    if not 0.0 < white_level <= 1.0:
        raise ValueError(f"white level must lie in (0, 1], got {white_level!r}")


def linearize(img: ImageGrid, white_level: float, gamma: float = GAMMA) -> ImageGrid:
    """Undo display gamma and apply the white level: ``w * img ** gamma``."""
    _check_white_level(white_level)
    if img.domain is not Domain.SRGB:
        raise ValueError(f"linearize expects an SRGB image, got {img.domain.value}")
    data = np.clip(img.data, 0.0, 1.0)
    return ImageGrid(white_level * data ** gamma, Domain.LINEAR)


def delinearize(img: ImageGrid, white_level: float, gamma: float = GAMMA) -> ImageGrid:
    """Reprocess a linear image for display; values above the white level clip to 1."""
    _check_white_level(white_level)
    if img.domain is not Domain.LINEAR:
        raise ValueError(f"delinearize expects a LINEAR image, got {img.domain.value}")
    data = np.clip(img.data / white_level, 0.0, 1.0)
    return ImageGrid(data ** (1.0 / gamma), Domain.SRGB)


def simulate_noise(x0: ImageGrid, p: NoiseParams, rng: np.random.Generator,
                   clip_at_zero: bool = True):
    """Draw ``y = x0 + sigma_p * n`` with ``sigma_p = sqrt(sigma_r^2 + sigma_s^2 x0)``.

    Returns ``(y, n)``; ``n`` is the standard-normal field before any clipping.
    Only the bottom is clipped, highlights are left unbounded.
    """
    if x0.domain is not Domain.LINEAR:
        raise ValueError("simulate_noise works on LINEAR images")
    if p.scaled:
        raise ValueError("simulate_noise expects unscaled (linear-unit) noise params")
    x = x0.data
    if np.any(x < 0):
        raise ValueError("clean image has negative entries")
    n = rng.standard_normal(x.shape)
    y = x + np.sqrt(p.variance(x)) * n
    if clip_at_zero:
        y = np.maximum(y, 0.0)
    return ImageGrid(y, Domain.LINEAR), ImageGrid(n, Domain.LINEAR)


def noise_std(x0: ImageGrid, p: NoiseParams) -> np.ndarray:
    return np.sqrt(p.variance(x0.data))


def scale_to_model_range(img: ImageGrid, p: NoiseParams | None = None):
    """Map a linear image to [-1, 1] via ``2x - 1`` and double the noise stds."""
    if img.domain is not Domain.LINEAR:
        raise ValueError("scale_to_model_range expects a LINEAR image")
    out = ImageGrid(2.0 * img.data - 1.0, Domain.MODEL)
    if p is None:
        return out, None
    if p.scaled:
        raise ValueError("noise params are already scaled")
    return out, replace(p, sigma_r=2.0 * p.sigma_r, sigma_s=2.0 * p.sigma_s, scaled=True)


def scale_from_model_range(img: ImageGrid, p: NoiseParams | None = None):
    if img.domain is not Domain.MODEL:
        raise ValueError("scale_from_model_range expects a MODEL image")
    out = ImageGrid((img.data + 1.0) / 2.0, Domain.LINEAR)
    if p is None:
        return out, None
    if not p.scaled:
        raise ValueError("noise params are not scaled")
    return out, replace(p, sigma_r=p.sigma_r / 2.0, sigma_s=p.sigma_s / 2.0, scaled=False)


def as_linear(img: ImageGrid) -> np.ndarray:
    """Linear-signal view of a LINEAR or MODEL image (no copy for LINEAR)."""
    if img.domain is Domain.LINEAR:
        return img.data
    if img.domain is Domain.MODEL:
        return (img.data + 1.0) / 2.0
    raise ValueError("SRGB images must be linearized first")


class PresetFileError(ValueError):
    pass


def load_gain_presets(path=None) -> list[GainPreset]:
    """Read ``{"name": {"sigma_r": .., "sigma_s": ..}, ...}`` presets.

    ``None`` or a missing file gives the built-in illustrative presets; an
    empty file gives an empty list.
    """
    if path is None:
        return list(BUILTIN_PRESETS.values())
    path = Path(path)
    if not path.exists():
        log.warning("preset file %s not found; using built-in illustrative presets", path)
        return list(BUILTIN_PRESETS.values())
    text = path.read_text()
    if not text.strip():
        log.warning("preset file %s is empty", path)
        return []
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise PresetFileError(f"{path}: line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise PresetFileError(f"{path}: top level must be an object")
    presets = []
    for name, entry in raw.items():
        try:
            sr, ss = float(entry["sigma_r"]), float(entry["sigma_s"])
        except (KeyError, TypeError, ValueError) as e:
            raise PresetFileError(f"{path}: preset {name!r} needs numeric sigma_r and sigma_s") from e
        if not (sr >= 0 and ss >= 0 and np.isfinite(sr) and np.isfinite(ss)):
            raise PresetFileError(f"{path}: preset {name!r} has negative or non-finite values")
        presets.append(GainPreset(name, sr, ss))
    return presets


def find_preset(name: str, path=None) -> GainPreset:
    for preset in load_gain_presets(path):
        if preset.name == name:
            return preset
    raise KeyError(f"unknown gain preset {name!r}")

"""Training-sample generation for each ablation scheme and the Adam training loop."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .denoiser import TinyNet
from .diffusion import forward_sample, forward_sample_correlated, run_inference, run_inference_from_noise
from .metrics import psnr, ssim
from .noise_model import (Domain, ImageGrid, NoiseParams, as_linear, delinearize, linearize,
                          simulate_noise)
from .schedule import Schedule, gamma_at
from .timemap import advance, estimate_timemap

log = logging.getLogger(__name__)


class Scheme(enum.Enum):
    BASELINE_A = "A"
    UNCOND_CLIP_B1 = "B1"
    UNCOND_NOCLIP_B2 = "B2"
    STANDARD_C1 = "C1"
    OVERSAMPLE_C2 = "C2"
    SVNR_C3 = "C3"

    @classmethod
    def parse(cls, s) -> "Scheme":
        if isinstance(s, cls):
            return s
        for m in cls:
            if s in (m.value, m.name):
                return m
        raise ValueError(f"unknown scheme {s!r}; choose from {[m.value for m in cls]}")

    @property
    def conditioned(self) -> bool:
        return self not in (Scheme.UNCOND_CLIP_B1, Scheme.UNCOND_NOCLIP_B2)

    @property
    def clips_input(self) -> bool:
        return self is not Scheme.UNCOND_NOCLIP_B2

    @property
    def oversamples(self) -> bool:
        return self in (Scheme.OVERSAMPLE_C2, Scheme.SVNR_C3,
                        Scheme.UNCOND_CLIP_B1, Scheme.UNCOND_NOCLIP_B2)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    scheme: Scheme = Scheme.SVNR_C3
    oversample_prob: float = 0.01
    sigma_r_range: tuple = (0.002, 0.05)
    sigma_s_range: tuple = (0.02, 0.25)
    white_level_range: tuple = (0.1, 1.0)
    iterations: int = 2000
    learning_rate: float = 1e-3
    warmup: int = 100
    batch: int = 8
    crop: int = 0
    seed: int = 0
    val_every: int = 100

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme)
        if not 0.0 <= self.oversample_prob <= 1.0:
            raise ValueError("oversample_prob must lie in [0, 1]")
        for name in ("sigma_r_range", "sigma_s_range", "white_level_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) pair")
            setattr(self, name, (float(lo), float(hi)))
        if self.white_level_range[1] > 1:
            raise ValueError("white levels cannot exceed 1")
        if self.iterations < 0 or self.batch < 1 or self.val_every < 1:
            raise ValueError("iterations, batch and val_every must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        return d


@dataclass
class TrainSample:
    x_t: np.ndarray
    t_map: np.ndarray
    y: Optional[np.ndarray]
    eps_target: np.ndarray
    t0: float = 0.0


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_noise_params(cfg: TrainConfig, rng) -> NoiseParams:
    return NoiseParams(_log_uniform(rng, *cfg.sigma_r_range), _log_uniform(rng, *cfg.sigma_s_range))


def source_noise(y, x0, T_map, s: Schedule) -> np.ndarray:
    """Noise of ``y`` relative to the variance of its (estimated) time map."""
    g = gamma_at(s, T_map)[..., None]
    root = np.sqrt(g)
    return np.divide(y - x0, root, out=np.zeros(np.broadcast_shapes(y.shape, root.shape)),
                     where=root > 0)


def _sample(x_t, t_map, y, eps, t0) -> TrainSample:
    # x_t does not depend on eps where t == 0, so the target there is pinned to zero
    eps = np.where(np.asarray(t_map)[..., None] > 0, eps, 0.0)
    return TrainSample(x_t, t_map, y, eps, t0)


def make_train_sample(x0: ImageGrid, cfg: TrainConfig, s: Schedule, rng: np.random.Generator,
                      p: NoiseParams | None = None) -> TrainSample:
    """Draw one training example for ``cfg.scheme``.

    ``x0`` is a clean MODEL-range image. The noisy condition ``y`` is simulated
    in the linear domain; the start time map is estimated from ``y``.
    """
    if x0.domain is not Domain.MODEL:
        raise ValueError("training samples are built from MODEL-range images")
    scheme = cfg.scheme
    x = x0.data
    if p is None:
        p = sample_noise_params(cfg, rng)
    y_lin, _ = simulate_noise(ImageGrid(as_linear(x0), Domain.LINEAR), p, rng,
                              clip_at_zero=scheme.clips_input)
    y = 2.0 * y_lin.data - 1.0
    T_hat = estimate_timemap(y, p, s)
    y_out = y if scheme.conditioned else None

    if scheme is Scheme.BASELINE_A:
        t = np.full(T_hat.shape, float(rng.integers(1, s.T + 1)))
        x_t, eps = forward_sample(x, t, s, rng)
        return _sample(x_t, t, y_out, eps, t0=float("nan"))

    forced = scheme.oversamples and rng.random() < cfg.oversample_prob
    t0 = 0.0 if forced else float(rng.uniform(0.0, float(T_hat.max())))
    t_hat = advance(T_hat, t0)
    n_src = source_noise(y, x, T_hat, s)

    if scheme is Scheme.OVERSAMPLE_C2 and forced:
        return _sample(y.copy(), T_hat, y_out, n_src, t0=0.0)
    if scheme in (Scheme.STANDARD_C1, Scheme.OVERSAMPLE_C2):
        x_t, eps = forward_sample(x, t_hat, s, rng)
        return _sample(x_t, t_hat, y_out, eps, t0=t0)

    # C3 and the unconditioned B variants use the correlated generator
    if t0 == 0.0:
        # consume the same draws as the generic branch to keep streams aligned
        rng.standard_normal(x.shape)
        return _sample(y.copy(), T_hat, y_out, n_src, t0=0.0)
    x_t, eps = forward_sample_correlated(x, n_src, T_hat, t_hat, s, rng)
    return _sample(x_t, t_hat, y_out, eps, t0=t0)


def loss(eps_hat, eps_target) -> float:
    a, b = np.asarray(eps_hat, dtype=float), np.asarray(eps_target, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------------
# data


def gaussian_random_field(size: int, rng, slope: float) -> np.ndarray:
    f = np.fft.fftfreq(size)
    k = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    k[0, 0] = 1.0
    spec = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / k ** slope
    spec[0, 0] = 0.0
    field_ = np.real(np.fft.ifft2(spec))
    return (field_ - field_.mean()) / (field_.std() + 1e-12)


def make_texture(size: int, rng) -> ImageGrid:
    """A 3-channel sRGB texture: coloured Gaussian random field plus a few hard edges."""
    base = rng.uniform(0.15, 0.85, 3)
    mix = rng.normal(0, 0.12, (3, 3)) + np.eye(3) * rng.uniform(0.05, 0.2)
    fields = np.stack([gaussian_random_field(size, rng, rng.uniform(1.0, 2.0)) for _ in range(3)], -1)
    img = base + fields @ mix
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(rng.integers(1, 4)):
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(-0.3, 0.3)
        mask = (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)) > off
        img = np.where(mask[..., None], img + rng.uniform(-0.35, 0.35, 3), img)
    return ImageGrid(np.clip(img, 0.0, 1.0), Domain.SRGB)


def make_textures(n: int, size: int = 32, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return [make_texture(size, rng) for _ in range(n)]


def _augment(img: np.ndarray, rng, crop: int = 0) -> np.ndarray:
    if crop and crop < min(img.shape[:2]):
        i = int(rng.integers(img.shape[0] - crop + 1))
        j = int(rng.integers(img.shape[1] - crop + 1))
        img = img[i:i + crop, j:j + crop]
    img = np.rot90(img, k=int(rng.integers(4)))
    if rng.random() < 0.5:
        img = img[:, ::-1]
    return np.ascontiguousarray(img)


def _to_model(srgb: np.ndarray, white_level: float) -> ImageGrid:
    lin = linearize(ImageGrid(srgb, Domain.SRGB), white_level)
    return ImageGrid(2.0 * lin.data - 1.0, Domain.MODEL)


def make_batch(dataset, cfg: TrainConfig, s: Schedule, rng):
    samples = []
    for _ in range(cfg.batch):
        img = dataset[int(rng.integers(len(dataset)))]
        w = float(rng.uniform(*cfg.white_level_range))
        x0 = _to_model(_augment(img.data, rng, cfg.crop), w)
        samples.append(make_train_sample(x0, cfg, s, rng))
    x_t = np.stack([b.x_t for b in samples])
    t = np.stack([b.t_map for b in samples])
    y = np.stack([b.y for b in samples]) if cfg.scheme.conditioned else None
    eps = np.stack([b.eps_target for b in samples])
    return x_t, y, t, eps


# --------------------------------------------------------------------------
# validation


@dataclass
class Validator:
    """Fixed validation images, noise realization and sampler seed."""

    clean: list
    params: NoiseParams
    schedule: Schedule
    white_level: float = 0.5
    seed: int = 1234
    _cache: dict = field(default_factory=dict, repr=False)

    def noisy(self, clip: bool) -> np.ndarray:
        key = ("noisy", clip)
        if key not in self._cache:
            rng = np.random.default_rng(self.seed)
            ys = []
            for img in self.clean:
                lin = linearize(img, self.white_level)
                y, _ = simulate_noise(lin, self.params, rng, clip_at_zero=clip)
                ys.append(2.0 * y.data - 1.0)
            self._cache[key] = np.stack(ys)
        return self._cache[key]

    def reference(self) -> list:
        return [delinearize(linearize(c, self.white_level), self.white_level) for c in self.clean]

    def to_srgb(self, x_model: np.ndarray) -> ImageGrid:
        lin = ImageGrid((x_model + 1.0) / 2.0, Domain.LINEAR)
        return delinearize(lin, self.white_level)

    def denoise(self, net: TinyNet, scheme: Scheme) -> np.ndarray:
        y = self.noisy(scheme.clips_input)
        rng = np.random.default_rng(self.seed + 1)
        if scheme is Scheme.BASELINE_A:
            out, _ = run_inference_from_noise(y, self.schedule, net, rng)
        else:
            out, _ = run_inference(y, self.params, self.schedule, net, rng)
        return out

    def evaluate(self, net: TinyNet, scheme: Scheme):
        out = self.denoise(net, scheme)
        refs = self.reference()
        ps, ss = [], []
        for ref, o in zip(refs, out):
            o_srgb = self.to_srgb(o)
            ps.append(psnr(ref, o_srgb))
            ss.append(ssim(ref, o_srgb))
        return float(np.mean(ps)), float(np.mean(ss))


# --------------------------------------------------------------------------
# optimisation


def learning_rate(it: int, cfg: TrainConfig) -> float:
    """Linear warm-up followed by cosine decay to zero at ``cfg.iterations``."""
    if cfg.warmup and it < cfg.warmup:
        return cfg.learning_rate * (it + 1) / cfg.warmup
    span = max(cfg.iterations - cfg.warmup, 1)
    frac = min((it - cfg.warmup) / span, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: dict, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    net: TinyNet
    log: list  # dicts with iter, loss, val_psnr, val_ssim


def train(dataset, cfg: TrainConfig, s: Schedule, validator: Validator | None = None,
          net: TinyNet | None = None) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on samples from ``cfg.scheme``.

    Validation metrics are logged every ``cfg.val_every`` iterations and at the
    end when a validator is given. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    init_seed = int(rng.integers(2 ** 31))
    if net is None:
        net = TinyNet.init(init_seed, conditioned=cfg.scheme.conditioned, scheme=cfg.scheme.value)
    opt = Adam(net.params)
    rows = []
    running = []

    def record(it):
        row = {"iter": it, "loss": float(np.mean(running)) if running else float("nan"),
               "val_psnr": float("nan"), "val_ssim": float("nan")}
        if validator is not None:
            row["val_psnr"], row["val_ssim"] = validator.evaluate(net, cfg.scheme)
        rows.append(row)
        running.clear()
        log.info("%s iter %d loss %.4f val_ssim %.4f", cfg.scheme.value, it, row["loss"], row["val_ssim"])

    for it in range(cfg.iterations):
        if it % cfg.val_every == 0:
            record(it)
        x_t, y, t, eps = make_batch(dataset, cfg, s, rng)
        value, grads = net.loss_and_grad(x_t, y, t, eps)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {it} ({cfg.scheme.value})")
        running.append(value)
        opt.step(net.params, grads, learning_rate(it, cfg))
    record(cfg.iterations)
    return TrainResult(net, rows)

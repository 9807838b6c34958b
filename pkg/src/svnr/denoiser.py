"""Noise predictors: the Gaussian-prior oracle and a small FiLM-conditioned conv net.

The network is written directly in numpy with explicit backpropagation. It
maps ``(x_t, y, t_map)`` to a noise estimate of the same shape as ``x_t``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .schedule import Schedule, gamma_at


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t_map: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Return the noise estimate for ``x_t``; same shape as ``x_t``."""
        ...


EMB_FREQ_RANGE = (100.0, 1e-3)


def time_embedding(t, dim: int = 16, freq_range=None) -> np.ndarray:
    """Sinusoidal features per pixel, interleaved as ``(sin, cos)`` pairs.

    Frequencies (radians per unit time) run geometrically over ``freq_range``.
    Output has shape ``t.shape + (dim,)``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    hi, lo = freq_range or EMB_FREQ_RANGE
    freqs = np.full(1, hi) if half == 1 else hi * (lo / hi) ** (np.arange(half) / (half - 1))
    ang = np.asarray(t, dtype=float)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def x0_from_eps(x_t, eps_hat, t_map, s: Schedule, clip: bool = True) -> np.ndarray:
    """Invert ``x_t = x0 + sqrt(gamma_t) eps``; zero-time pixels pass ``x_t`` through."""
    x_t = np.asarray(x_t, dtype=float)
    g = gamma_at(s, np.broadcast_to(t_map, x_t.shape[:-1]))[..., None]
    x0 = x_t - np.sqrt(g) * np.asarray(eps_hat)
    x0 = np.where(g > 0, x0, x_t)
    return np.clip(x0, -1.0, 1.0) if clip else x0


@dataclass(frozen=True)
class GaussianPrior:
    """Independent per-pixel Gaussian prior ``x0 ~ N(mu0, var0)`` in model range."""

    mu0: np.ndarray
    var0: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.var0) <= 0):
            raise ValueError("prior variance must be positive")

    def posterior_mean(self, obs, obs_var):
        """MMSE estimate of ``x0`` from ``obs = x0 + sqrt(obs_var) n``."""
        return (self.var0 * obs + obs_var * self.mu0) / (self.var0 + obs_var)


def analytic_predict(prior: GaussianPrior, x_t, t_map, s: Schedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    g = gamma_at(s, np.broadcast_to(t_map, x_t.shape[:-1]))[..., None]
    x0 = prior.posterior_mean(x_t, g)
    root = np.sqrt(g)
    return np.divide(x_t - x0, root, out=np.zeros(np.broadcast_shapes(x_t.shape, x0.shape)),
                     where=root > 0)


class AnalyticDenoiser:
    """Closed-form posterior-mean denoiser for a conjugate Gaussian prior (ignores ``y``)."""

    def __init__(self, prior: GaussianPrior, schedule: Schedule):
        self.prior = prior
        self.schedule = schedule

    def predict(self, x_t, t_map, y=None):
        return analytic_predict(self.prior, x_t, t_map, self.schedule)


# --------------------------------------------------------------------------
# tiny conv net

WIDTHS = (6, 32, 32, 32, 3)
KERNEL = 3
EMB_DIM = 16
N_FILM = 3

_MAGIC = b"SVNRNET1"


def param_shapes(widths=WIDTHS, emb_dim=EMB_DIM) -> dict:
    shapes = {}
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        shapes[f"W{i}"] = (cin, KERNEL, KERNEL, cout)
        shapes[f"b{i}"] = (cout,)
        if i <= N_FILM:
            shapes[f"F{i}"] = (emb_dim, 2 * cout)
            shapes[f"c{i}"] = (2 * cout,)
    return shapes


def _pad(x, mode):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="wrap" if mode == "wrap" else "constant")


def _unpad_adjoint(dxp, mode):
    dx = dxp[:, 1:-1, 1:-1].copy()
    if mode == "wrap":
        dx[:, -1, :] += dxp[:, 0, 1:-1]
        dx[:, 0, :] += dxp[:, -1, 1:-1]
        dx[:, :, -1] += dxp[:, 1:-1, 0]
        dx[:, :, 0] += dxp[:, 1:-1, -1]
        dx[:, -1, -1] += dxp[:, 0, 0]
        dx[:, -1, 0] += dxp[:, 0, -1]
        dx[:, 0, -1] += dxp[:, -1, 0]
        dx[:, 0, 0] += dxp[:, -1, -1]
    return dx


def _im2col(x, mode):
    b, h, w, c = x.shape
    win = sliding_window_view(_pad(x, mode), (KERNEL, KERNEL), axis=(1, 2))  # b,h,w,c,3,3
    return win.reshape(b * h * w, c * KERNEL * KERNEL)


def _col2im(dcols, shape, mode):
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return _unpad_adjoint(dxp, mode)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class TinyNet:
    """Four 3x3 conv layers (6 -> 32 -> 32 -> 32 -> 3), FiLM-modulated per pixel by the time map.

    ``params`` maps names from :func:`param_shapes` to arrays. ``conditioned``
    False zeroes the ``y`` input channels (unconditioned variants).
    """

    def __init__(self, params: dict, conditioned: bool = True, padding: str = "zero",
                 dtype=np.float32, seed: int | None = None, scheme: str | None = None):
        shapes = param_shapes()
        if set(params) != set(shapes):
            raise ValueError("parameter names do not match the architecture")
        for k, shp in shapes.items():
            if tuple(params[k].shape) != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {params[k].shape}")
        if padding not in ("zero", "wrap"):
            raise ValueError("padding must be 'zero' or 'wrap'")
        self.dtype = np.dtype(dtype)
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self.conditioned = conditioned
        self.padding = padding
        self.seed = seed
        self.scheme = scheme

    @classmethod
    def init(cls, seed: int, conditioned: bool = True, **kw) -> "TinyNet":
        rng = np.random.default_rng(seed)
        params = {}
        for k, shp in param_shapes().items():
            if k[0] == "W":
                fan_in = shp[0] * KERNEL * KERNEL
                scale = np.sqrt(2.0 / fan_in) * (0.1 if shp[-1] == WIDTHS[-1] else 1.0)
                params[k] = rng.normal(0.0, scale, shp)
            elif k[0] == "F":
                params[k] = rng.normal(0.0, 0.1, shp)
            else:
                params[k] = np.zeros(shp)
        return cls(params, conditioned=conditioned, seed=seed, **kw)

    @classmethod
    def zeros(cls, **kw) -> "TinyNet":
        return cls({k: np.zeros(s) for k, s in param_shapes().items()}, **kw)

    # -- forward / backward ------------------------------------------------

    def _inputs(self, x_t, y, t_map):
        x_t = np.asarray(x_t)
        y = np.asarray(y) if y is not None else np.zeros_like(x_t)
        if x_t.shape != y.shape:
            raise ValueError(f"x_t {x_t.shape} and y {y.shape} differ in shape")
        if x_t.shape[-1] != 3:
            raise ValueError("the network expects 3-channel images")
        lead = x_t.shape[:-3]
        h, w = x_t.shape[-3:-1]
        t_map = np.broadcast_to(np.asarray(t_map, dtype=float), x_t.shape[:-1])
        if not self.conditioned:
            y = np.zeros_like(x_t)
        z = np.concatenate([x_t, y], axis=-1).reshape(-1, h, w, 6).astype(self.dtype)
        emb = time_embedding(t_map.reshape(-1, h, w), EMB_DIM).astype(self.dtype)
        return z, emb, lead

    def _forward(self, z, emb):
        p = self.params
        cache = []
        a = z
        n_layers = len(WIDTHS) - 1
        for i in range(1, n_layers + 1):
            shape_in = a.shape
            cols = _im2col(a, self.padding)
            wmat = p[f"W{i}"].reshape(-1, p[f"W{i}"].shape[-1])
            h = (cols @ wmat).reshape(shape_in[:3] + (wmat.shape[1],)) + p[f"b{i}"]
            if i == n_layers:
                cache.append((cols, shape_in, None, None, None))
                return h, cache
            proj = emb @ p[f"F{i}"] + p[f"c{i}"]
            cout = h.shape[-1]
            scale, shift = proj[..., :cout], proj[..., cout:]
            hf = h * (1.0 + scale) + shift
            sig = _sigmoid(hf)
            a = hf * sig
            cache.append((cols, shape_in, h, scale, (hf, sig)))

    def forward(self, x_t, y, t_map):
        z, emb, lead = self._inputs(x_t, y, t_map)
        out, _ = self._forward(z, emb)
        return out.reshape(lead + out.shape[1:])

    def predict(self, x_t, t_map, y):
        return self.forward(x_t, y, t_map).astype(float)

    def loss_and_grad(self, x_t, y, t_map, target):
        """MSE between the prediction and ``target`` plus gradients for every parameter."""
        z, emb, lead = self._inputs(x_t, y, t_map)
        out, cache = self._forward(z, emb)
        target = np.asarray(target, dtype=self.dtype).reshape(out.shape)
        diff = out - target
        loss = float(np.mean(diff.astype(float) ** 2))
        grads = {}
        p = self.params
        emb2d = emb.reshape(-1, EMB_DIM)
        d = (2.0 / diff.size) * diff
        for i in range(len(cache), 0, -1):
            cols, shape_in, h, scale, act = cache[i - 1]
            if act is not None:
                hf, sig = act
                dhf = d * (sig * (1.0 + hf * (1.0 - sig)))
                cout = h.shape[-1]
                dproj = np.concatenate([dhf * h, dhf], axis=-1).reshape(-1, 2 * cout)
                grads[f"F{i}"] = emb2d.T @ dproj
                grads[f"c{i}"] = dproj.sum(axis=0)
                d = dhf * (1.0 + scale)
            cout = d.shape[-1]
            d2 = d.reshape(-1, cout)
            wshape = p[f"W{i}"].shape
            grads[f"W{i}"] = (cols.T @ d2).reshape(wshape)
            grads[f"b{i}"] = d2.sum(axis=0)
            if i > 1:
                dcols = d2 @ p[f"W{i}"].reshape(-1, cout).T
                d = _col2im(dcols, shape_in, self.padding)
        return loss, grads

    # -- serialization -----------------------------------------------------

    def header(self) -> dict:
        return {
            "format": "svnr-tinynet",
            "version": 1,
            "architecture": {"widths": list(WIDTHS), "kernel": KERNEL, "emb_dim": EMB_DIM,
                             "emb_freq_range": list(EMB_FREQ_RANGE), "film_layers": N_FILM,
                             "activation": "silu", "padding": self.padding},
            "conditioned": self.conditioned,
            "scheme": self.scheme,
            "init_seed": self.seed,
            "layers": [{"name": k, "shape": list(s)} for k, s in param_shapes().items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes()
                        for k in param_shapes())
        return _MAGIC + struct.pack("<I", len(head)) + head + body

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, dtype=np.float32) -> "TinyNet":
        if raw[:8] != _MAGIC:
            raise ValueError("not a tinynet weight file (bad magic)")
        (n,) = struct.unpack("<I", raw[8:12])
        head = json.loads(raw[12:12 + n])
        arch = head.get("architecture", {})
        if (list(arch.get("widths", [])) != list(WIDTHS) or arch.get("emb_dim") != EMB_DIM
                or arch.get("emb_freq_range") != list(EMB_FREQ_RANGE)):
            raise ValueError(f"architecture mismatch: {arch}")
        flat = np.frombuffer(raw, dtype="<f4", offset=12 + n)
        params, off = {}, 0
        for layer in head["layers"]:
            shp = tuple(layer["shape"])
            size = int(np.prod(shp))
            if off + size > flat.size:
                raise ValueError("weight payload is truncated")
            params[layer["name"]] = flat[off:off + size].reshape(shp)
            off += size
        if off != flat.size:
            raise ValueError("weight payload has trailing data")
        return cls(params, conditioned=head["conditioned"], padding=arch.get("padding", "zero"),
                   dtype=dtype, seed=head.get("init_seed"), scheme=head.get("scheme"))

    @classmethod
    def load(cls, path, dtype=np.float32) -> "TinyNet":
        return cls.from_bytes(Path(path).read_bytes(), dtype=dtype)


def tinynet_predict(w: TinyNet, x_t, y, t_map) -> np.ndarray:
    return w.predict(x_t, t_map, y)

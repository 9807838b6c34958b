"""Forward sampling, the spatially-variant reverse step, and the inference loop.

Images are arrays of shape ``(..., H, W, C)`` in model range; time maps are
``(..., H, W)`` and broadcast over channels. Leading batch axes are allowed
everywhere, so a whole Monte-Carlo ensemble can run as one array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .denoiser import Denoiser, x0_from_eps
from .noise_model import ImageGrid, NoiseParams
from .schedule import Schedule, gamma_at
from .timemap import advance, estimate_timemap, steps_needed


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, ImageGrid) else np.asarray(x, dtype=float)


def _pix(m: np.ndarray) -> np.ndarray:
    return np.asarray(m)[..., None]


def forward_sample(x0, t_map, s: Schedule, rng: np.random.Generator):
    """Sample ``x_t ~ N(x0, gamma(t))`` independently per pixel.

    Returns ``(x_t, n)`` with ``n`` the standard-normal draw used.
    """
    x0 = _arr(x0)
    g = _pix(gamma_at(s, np.broadcast_to(t_map, x0.shape[:-1])))
    n = rng.standard_normal(x0.shape)
    return x0 + np.sqrt(g) * n, n


def forward_sample_correlated(x0, n_src, T_map, t_map, s: Schedule, rng: np.random.Generator):
    """Sample ``x_t`` as it appears after reverse-diffusing from ``y = x0 + sqrt(gamma_T) n_src``.

    ``x_t = x0 + gamma_t / sqrt(gamma_T) n_src + sqrt(gamma_t (1 - gamma_t / gamma_T)) n_new``.
    Returns ``(x_t, eps)`` where ``eps`` is the unit-variance combined noise
    with ``x_t = x0 + sqrt(gamma_t) eps``.
    """
    x0, n_src = _arr(x0), _arr(n_src)
    T_map = np.broadcast_to(np.asarray(T_map, dtype=float), x0.shape[:-1])
    t_map = np.broadcast_to(np.asarray(t_map, dtype=float), x0.shape[:-1])
    if np.any(t_map > T_map):
        raise ValueError("target time map exceeds the source time map")
    g_T = _pix(gamma_at(s, T_map))
    g_t = _pix(gamma_at(s, t_map))
    live = g_T > 0
    ratio = np.divide(g_t, g_T, out=np.zeros_like(g_t * g_T), where=live)
    n_new = rng.standard_normal(x0.shape)
    # the source term is formed as sqrt(gamma_T) * n_src so that t == T reproduces y bit for bit
    src = np.sqrt(g_T) * n_src
    x_t = x0 + ratio * src + np.sqrt(g_t * np.maximum(1.0 - ratio, 0.0)) * n_new
    eps = np.sqrt(ratio) * n_src + np.sqrt(np.maximum(1.0 - ratio, 0.0)) * n_new
    x_t = np.where(live, x_t, x0)
    eps = np.where(live, eps, 0.0)
    return x_t, eps


@dataclass
class ReversePosterior:
    mu: np.ndarray
    var: np.ndarray


def reverse_posterior(s: Schedule, t, x_t, x0) -> ReversePosterior:
    """Gaussian ``q(x_{t'} | x_t, x0)`` with ``t' = max(t - 1, 0)``.

    ``t`` may be a scalar or a per-pixel map, fractional times allowed. Pixels
    already at time zero keep ``x_t`` with zero variance.
    """
    x_t, x0 = _arr(x_t), _arr(x0)
    t = np.broadcast_to(np.asarray(t, dtype=float), x_t.shape[:-1])
    t_prev = advance(t, 1.0)
    g_t = gamma_at(s, t)
    g_prev = gamma_at(s, t_prev)
    if np.any((g_t <= 0) & (t >= 1)):
        raise ValueError("gamma_t vanishes at a positive time; schedule is corrupted")
    safe = np.where(g_t > 0, g_t, 1.0)
    eta = g_t - g_prev
    c_xt = _pix(g_prev / safe)
    c_x0 = _pix(eta / safe)
    mu = c_xt * x_t + c_x0 * x0
    var = np.broadcast_to(_pix(g_prev * eta / safe), mu.shape)
    to_zero = _pix((t_prev == 0) & (t > 0))
    at_zero = _pix(t == 0)
    mu = np.where(to_zero, x0, np.where(at_zero, x_t, mu))
    var = np.where(to_zero | at_zero, 0.0, var)
    return ReversePosterior(mu, var)


@dataclass
class DiffusionState:
    """Current sample, per-pixel times, condition image and freeze mask."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    frozen: np.ndarray

    @classmethod
    def start(cls, y, t_map):
        y = _arr(y)
        t = np.asarray(t_map, dtype=float)
        return cls(x=y.copy(), t=t.copy(), y=y, frozen=(t == 0))


def reverse_step(state: DiffusionState, x0_hat, s: Schedule, rng: np.random.Generator) -> DiffusionState:
    """One reverse step at every pixel's own time; pixels landing on zero take ``x0_hat`` and freeze."""
    if np.all(state.frozen):
        raise ValueError("every pixel is already frozen")
    x0_hat = _arr(x0_hat)
    post = reverse_posterior(s, state.t, state.x, x0_hat)
    # draw for every pixel so the stream does not depend on the freeze pattern
    n = rng.standard_normal(state.x.shape)
    t_new = advance(state.t, 1.0)
    landing = (t_new == 0) & ~state.frozen
    x_new = post.mu + np.sqrt(post.var) * n
    x_new = np.where(_pix(landing), x0_hat, x_new)
    x_new = np.where(_pix(state.frozen), state.x, x_new)
    t_new = np.where(state.frozen, 0.0, t_new)
    return DiffusionState(x=x_new, t=t_new, y=state.y, frozen=state.frozen | landing)


def run_inference(y, p: NoiseParams, s: Schedule, d: Denoiser, rng: np.random.Generator,
                  clip: bool = True,
                  trace: Optional[Callable[[int, DiffusionState], None]] = None):
    """Denoise ``y`` (model range) by reverse diffusion started from ``y`` itself.

    Returns ``(x0_hat, steps_used)``; ``steps_used == ceil(max(T_hat))``.
    """
    y = _arr(y)
    t_hat = estimate_timemap(y, p, s)
    state = DiffusionState.start(y, t_hat)
    expected = steps_needed(t_hat)
    steps = 0
    if trace is not None:
        trace(0, state)
    while np.any(state.t > 0):
        eps = d.predict(state.x, state.t, state.y)
        x0_hat = x0_from_eps(state.x, eps, state.t, s, clip=clip)
        state = reverse_step(state, x0_hat, s, rng)
        steps += 1
        if trace is not None:
            trace(steps, state)
    assert steps == expected, (steps, expected)
    return state.x, steps


def run_inference_from_noise(y, s: Schedule, d: Denoiser, rng: np.random.Generator,
                             clip: bool = True):
    """Conditioned baseline: start every pixel at ``T`` from pure noise, ignore ``y``'s noise level."""
    y = _arr(y)
    t = np.full(y.shape[:-1], float(s.T))
    x = np.sqrt(s.gamma_max) * rng.standard_normal(y.shape)
    state = DiffusionState(x=x, t=t, y=y, frozen=np.zeros(t.shape, dtype=bool))
    while np.any(state.t > 0):
        eps = d.predict(state.x, state.t, state.y)
        state = reverse_step(state, x0_from_eps(state.x, eps, state.t, s, clip=clip), s, rng)
    return state.x, s.T

"""Non-stationary (variance exploding) diffusion schedule.

The forward chain adds noise without attenuating the signal::

    x_t = x_{t-1} + sqrt(eta_t) n,     x_t | x_0 ~ N(x_0, gamma_t)

with ``gamma_t = lambda * (1 - alpha_bar_t)`` so the cumulative variance is a
scaled copy of the familiar DDPM ``1 - alpha_bar_t`` curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEPS = 1000
DEFAULT_BETA_FIRST = 0.02
DEFAULT_BETA_LAST = 1e-8
DEFAULT_LAMBDA = 20.0


class ScheduleError(ValueError):
    """Raised for out-of-domain schedule parameters or queries."""


@dataclass(frozen=True, eq=False)
class Schedule:
    """Immutable container for all schedule arrays.

    ``beta``, ``alpha_bar`` and ``eta`` are indexed 1..T and stored 0-based
    (``beta[0]`` is beta_1). ``gamma`` has T+1 entries with ``gamma[0] == 0``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    eta: np.ndarray
    gamma: np.ndarray
    lam: float

    def __post_init__(self):
        for arr in (self.beta, self.alpha_bar, self.eta, self.gamma):
            arr.setflags(write=False)

    @property
    def gamma_max(self) -> float:
        return float(self.gamma[-1])


def build_schedule(T: int = DEFAULT_STEPS,
                   beta_first: float = DEFAULT_BETA_FIRST,
                   beta_last: float = DEFAULT_BETA_LAST,
                   lam: float = DEFAULT_LAMBDA) -> Schedule:
    """Build a schedule with beta linearly spaced from ``beta_first`` to ``beta_last``.

    Args:
        T: number of discrete steps.
        beta_first: beta_1.
        beta_last: beta_T. Smaller than ``beta_first`` gives a descending ramp.
        lam: variance scale; ``gamma_T`` approaches ``lam`` as alpha_bar -> 0.

    Returns:
        Schedule with ``gamma_t = lam * (1 - alpha_bar_t)`` and
        ``eta_t = gamma_t - gamma_{t-1}``.
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    for name, b in (("beta_first", beta_first), ("beta_last", beta_last)):
        if not 0.0 < b < 1.0:
            raise ScheduleError(f"{name} must lie in (0, 1), got {b!r}")
    if not lam > 0.0 or not np.isfinite(lam):
        raise ScheduleError(f"lambda must be positive, got {lam!r}")
    T = int(T)

    beta = np.linspace(beta_first, beta_last, T) if T > 1 else np.array([beta_first], dtype=float)
    alpha_bar = np.cumprod(1.0 - beta)
    gamma = np.concatenate([[0.0], lam * (1.0 - alpha_bar)])
    eta = np.diff(gamma)
    if not np.all(eta > 0):
        # only reachable when lam * beta underflows against 1 - alpha_bar rounding
        raise ScheduleError("schedule is not strictly increasing in double precision")
    return Schedule(T=T, beta=beta, alpha_bar=alpha_bar, eta=eta, gamma=gamma, lam=float(lam))


def eta_closed_form(s: Schedule) -> np.ndarray:
    """``lam * beta_t * prod_{i<t}(1 - beta_i)`` evaluated directly."""
    prev = np.concatenate([[1.0], np.cumprod(1.0 - s.beta)[:-1]])
    return s.lam * s.beta * prev


def gamma_at(s: Schedule, t):
    """Cumulative variance at (possibly fractional) time ``t``.

    Linear interpolation between the bracketing integer steps; accepts scalars
    or arrays.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0) or np.any(t_arr > s.T):
        raise ScheduleError(f"time outside [0, {s.T}]")
    lo = np.minimum(np.floor(t_arr).astype(np.int64), s.T - 1)
    frac = t_arr - lo
    g = s.gamma[lo] + frac * (s.gamma[lo + 1] - s.gamma[lo])
    return float(g) if g.ndim == 0 else g


def time_for_variance(s: Schedule, v):
    """Inverse of :func:`gamma_at`; variances above ``gamma_T`` clamp to ``T``."""
    v_arr = np.asarray(v, dtype=float)
    if np.any(np.isnan(v_arr)) or np.any(v_arr < 0):
        raise ScheduleError("variance must be nonnegative")
    v_c = np.minimum(v_arr, s.gamma[-1])
    # hi is the first index with gamma[hi] >= v, so gamma[hi-1] < v <= gamma[hi]
    hi = np.clip(np.searchsorted(s.gamma, v_c, side="left"), 1, s.T)
    lo = hi - 1
    t = lo + (v_c - s.gamma[lo]) / (s.gamma[hi] - s.gamma[lo])
    t = np.clip(t, 0.0, float(s.T))
    return float(t) if t.ndim == 0 else t


def reverse_variance(s: Schedule, t: int) -> float:
    """Posterior variance ``gamma_{t-1} * eta_t / gamma_t`` of one reverse step."""
    if int(t) != t or not 1 <= t <= s.T:
        raise ScheduleError(f"t must be an integer in [1, {s.T}], got {t!r}")
    t = int(t)
    return float(s.gamma[t - 1] * s.eta[t - 1] / s.gamma[t])

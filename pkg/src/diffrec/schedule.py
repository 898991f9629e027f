"""Linear noise schedule and the closed-form Gaussian quantities derived from it.

The schedule is linear in the cumulative noise level ``1 - abar_t``::

    1 - abar_t = s * (noise_min + (t-1)/(T-1) * (noise_max - noise_min)),  t = 1..T

All derived arrays are computed from ``one_minus_abar`` directly rather than
from ``abar`` so that tiny noise scales (``s ~ 1e-4``) keep full relative
precision. Arrays are indexed by step, with slot 0 holding the ``t = 0``
convention (``abar_0 = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    noise_scale: float
    noise_min: float
    noise_max: float
    one_minus_abar: np.ndarray
    abar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    posterior_var: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True for ``s = 0``: forward corruption is the identity."""
        return self.noise_scale == 0.0

    def check_step(self, t) -> None:
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.steps):
            raise UsageError(f"step index out of range 1..{self.steps}: {t}")

    def snr(self, t) -> np.ndarray:
        """abar_t / (1 - abar_t); infinite at t = 0."""
        t = np.asarray(t)
        with np.errstate(divide="ignore"):
            return self.abar[t] / self.one_minus_abar[t]

    def loss_weight(self, t) -> np.ndarray:
        """Per-step weight on ``||x0_hat - x0||^2``.

        ``(snr(t-1) - snr(t)) / 2`` for t >= 2, 1 for the reconstruction step
        t = 1, and 1 everywhere when the schedule is degenerate.
        """
        t = np.asarray(t)
        if self.degenerate:
            return np.ones(t.shape)
        # snr(t-1) - snr(t) == abar_{t-1} * beta_t / ((1-abar_{t-1}) (1-abar_t))
        tm1 = np.maximum(t - 1, 1)
        w = 0.5 * self.abar[tm1] * self.beta[t] / (self.one_minus_abar[tm1] * self.one_minus_abar[t])
        return np.where(t == 1, 1.0, w)

    def posterior_coefs(self, t):
        """(coef_xt, coef_x0) of the posterior mean of ``x_{t-1}`` given ``x_t, x0``."""
        t = np.asarray(t)
        coef_xt = np.sqrt(self.alpha[t]) * self.one_minus_abar[t - 1] / self.one_minus_abar[t]
        coef_x0 = np.sqrt(self.abar[t - 1]) * self.beta[t] / self.one_minus_abar[t]
        return coef_xt, coef_x0


def build_schedule(noise_scale: float, noise_min: float, noise_max: float, steps: int) -> NoiseSchedule:
    s, lo, hi, T = float(noise_scale), float(noise_min), float(noise_max), int(steps)
    if not 0.0 <= s <= 1.0:
        raise ConfigError(f"noise_scale must lie in [0, 1], got {s}")
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError(f"need 0 < noise_min < noise_max < 1, got {lo}, {hi}")
    if T < 1:
        raise ConfigError(f"steps must be >= 1, got {T}")

    t = np.arange(1, T + 1, dtype=np.float64)
    frac = (t - 1.0) / (T - 1.0) if T > 1 else np.zeros(1)
    oma = np.empty(T + 1)
    oma[0] = 0.0
    oma[1:] = s * (lo + frac * (hi - lo))
    abar = 1.0 - oma

    beta = np.zeros(T + 1)
    # beta_t = 1 - abar_t/abar_{t-1} = (oma_t - oma_{t-1}) / (1 - oma_{t-1})
    beta[1:] = (oma[1:] - oma[:-1]) / (1.0 - oma[:-1])
    alpha = 1.0 - beta

    post = np.zeros(T + 1)
    if s > 0 and T > 1:
        post[2:] = beta[2:] * oma[1:-1] / oma[2:]

    for arr in (oma, abar, alpha, beta, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, s, lo, hi, oma, abar, alpha, beta, post)


def q_sample(sched: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` scalar or one per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ConfigError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    sched.check_step(t)
    a, b = _row_coefs(np.sqrt(sched.abar), np.sqrt(sched.one_minus_abar), t, x0.ndim)
    return a * x0 + b * eps


def _row_coefs(arr_a, arr_b, t, ndim):
    t = np.asarray(t)
    a, b = arr_a[t], arr_b[t]
    if t.ndim == 1 and ndim == 2:
        a, b = a[:, None], b[:, None]
    return a, b


def posterior_mean(sched: NoiseSchedule, x_t: np.ndarray, x0: np.ndarray, t) -> np.ndarray:
    if sched.degenerate:
        raise UsageError("posterior mean is undefined for a zero-noise schedule")
    sched.check_step(t)
    if np.any(np.asarray(t) < 2):
        raise UsageError("posterior mean needs t >= 2; t = 1 is the reconstruction step")
    cx, c0 = sched.posterior_coefs(np.asarray(t))
    if np.ndim(t) == 1 and np.ndim(x_t) == 2:
        cx, c0 = cx[:, None], c0[:, None]
    return cx * np.asarray(x_t) + c0 * np.asarray(x0)

"""Forward noising, reverse posterior and the guided ancestral sampler."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)

# posterior variance floor at t=1, as a fraction of beta_1
VARIANCE_FLOOR = 1e-3

EpsFn = Callable[[np.ndarray, int], np.ndarray]
GuidanceFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_hat: np.ndarray

    def __post_init__(self):
        if len(self.beta) != self.T:
            raise ValueError("schedule length mismatch")

    def _i(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")
        return t - 1

    def beta_t(self, t: int) -> float:
        return float(self.beta[self._i(t)])

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[self._i(t)])

    def alpha_hat_t(self, t: int) -> float:
        return float(self.alpha_hat[self._i(t)])

    def alpha_hat_prev(self, t: int) -> float:
        return 1.0 if t == 1 else self.alpha_hat_t(t - 1)

    def posterior_variance(self, t: int) -> float:
        b = self.beta_t(t)
        var = b * (1.0 - self.alpha_hat_prev(t)) / (1.0 - self.alpha_hat_t(t))
        return max(var, VARIANCE_FLOOR * float(self.beta[0]))


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative products of ``1 - beta``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_hat = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_hat):
        arr.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_hat)


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ah = sched.alpha_hat_t(t)
    return math.sqrt(ah) * x0 + math.sqrt(1.0 - ah) * eps


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    ah = sched.alpha_hat_t(t)
    return (x_t - math.sqrt(1.0 - ah) * eps_hat) / math.sqrt(ah)


def posterior_mean_sigma(
    x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule
) -> tuple[np.ndarray, float]:
    """Mean and isotropic variance of ``p(x_{t-1} | x_t)``."""
    a = sched.alpha_t(t)
    b = sched.beta_t(t)
    ah = sched.alpha_hat_t(t)
    mu = (x_t - (b / math.sqrt(1.0 - ah)) * eps_hat) / math.sqrt(a)
    return mu, sched.posterior_variance(t)


def q_posterior_mean(x0: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Mean of ``q(x_{t-1} | x_t, x_0)`` written in terms of ``x_0``."""
    ah = sched.alpha_hat_t(t)
    ah_prev = sched.alpha_hat_prev(t)
    b = sched.beta_t(t)
    a = sched.alpha_t(t)
    c0 = math.sqrt(ah_prev) * b / (1.0 - ah)
    ct = math.sqrt(a) * (1.0 - ah_prev) / (1.0 - ah)
    return c0 * x0 + ct * x_t


@dataclass
class GuidanceConfig:
    """Weights and scale of the physics guidance.

    ``active_window`` is an inclusive ``(t_lo, t_hi)`` step range; ``None``
    means the final ``window_fraction`` of the schedule.
    """

    gamma_coll: float = 1.0
    gamma_layout: float = 1.0
    gamma_reach: float = 1.0
    lam: float = 1.0
    active_window: Optional[tuple[int, int]] = None
    window_fraction: float = 0.1
    fd_step_translation: float = 0.01
    fd_step_angle: float = math.radians(0.5)

    def __post_init__(self):
        for name in ("gamma_coll", "gamma_layout", "gamma_reach", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.fd_step_translation <= 0 or self.fd_step_angle <= 0:
            raise ValueError("finite-difference steps must be positive")
        if self.active_window is not None:
            lo, hi = self.active_window
            if not 1 <= lo <= hi:
                raise ValueError("active window must satisfy 1 <= t_lo <= t_hi")
            self.active_window = (int(lo), int(hi))

    def window(self, T: int) -> tuple[int, int]:
        if self.active_window is not None:
            lo, hi = self.active_window
            if hi > T:
                raise ValueError(f"active window {self.active_window} exceeds T={T}")
            return lo, hi
        return 1, max(1, int(math.ceil(self.window_fraction * T)))

    def is_active(self, t: int, T: int) -> bool:
        lo, hi = self.window(T)
        return self.lam > 0 and self.any_weight and lo <= t <= hi

    @property
    def any_weight(self) -> bool:
        return self.gamma_coll > 0 or self.gamma_layout > 0 or self.gamma_reach > 0

    @property
    def gammas(self) -> tuple[float, float, float]:
        return (self.gamma_coll, self.gamma_layout, self.gamma_reach)


def guided_step(
    x_t: np.ndarray,
    t: int,
    eps_fn: EpsFn,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    guidance_fn: Optional[Callable[[np.ndarray, int], np.ndarray]],
    rng: np.random.Generator,
    incidents: Optional[Counter] = None,
) -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}`` with the constraint-perturbed mean.

    ``x_t`` may be a single vector or a ``(B, dim)`` batch. ``guidance_fn``
    receives the predicted clean sample (same shape as ``x_t``) and returns
    the gradient of the guidance objective with respect to it, row by row.
    The gradient with respect to ``x_t`` follows by the chain rule through
    the clean-sample estimate with the network output held fixed.
    """
    eps_hat = eps_fn(x_t, t)
    mu, var = posterior_mean_sigma(x_t, eps_hat, t, sched)
    mean = mu
    if guidance_fn is not None and cfg.is_active(t, sched.T):
        x0_tilde = predict_x0(mu, eps_hat, t, sched)
        g = np.asarray(guidance_fn(x0_tilde, t), dtype=float) / math.sqrt(sched.alpha_hat_t(t))
        finite = np.isfinite(g)
        if g.ndim == 2:
            bad_rows = ~finite.all(axis=1)
            if bad_rows.any():
                if incidents is not None:
                    incidents["nonfinite_guidance"] += int(bad_rows.sum())
                g = np.where(bad_rows[:, None], 0.0, g)
        elif not finite.all():
            if incidents is not None:
                incidents["nonfinite_guidance"] += 1
            g = np.zeros_like(g)
        mean = mu + cfg.lam * var * g
    if t == 1:
        return mean
    z = rng.standard_normal(np.shape(x_t))
    return mean + math.sqrt(var) * z


def sample_encoded(
    eps_fn: EpsFn,
    dim: int | tuple[int, ...],
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    guidance_fn=None,
    rng: Optional[np.random.Generator] = None,
    incidents: Optional[Counter] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Run the full reverse chain from ``x_T ~ N(0, I)``; returns ``x_0``."""
    rng = rng if rng is not None else np.random.default_rng()
    x = rng.standard_normal(dim)
    for t in range(sched.T, 0, -1):
        x = guided_step(x, t, eps_fn, sched, cfg, guidance_fn, rng, incidents)
        if callback is not None:
            callback(t, x)
    return x

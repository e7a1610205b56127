"""Variance-preserving forward SDE, its Gaussian kernel and the reverse-time
Euler-Maruyama integrator.

All functions work on batches: points are arrays of shape ``(n, d)`` and a
time argument may be a scalar or an array of shape ``(n,)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta VP schedule on ``[0, t_end]``.

    ``beta(t) = beta_min + t * (beta_max - beta_min)``, so the signal level
    ``alpha_bar(t) = exp(-int_0^t beta)`` has a closed form.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_end: float = 1.0
    t_eps: float = 1e-3

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max):
            raise DomainError(
                f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}"
            )
        if not (0 < self.t_eps < self.t_end):
            raise DomainError(f"need 0 < t_eps < t_end, got {self.t_eps}, {self.t_end}")

    def _check_t(self, t, lo=0.0):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < lo) or np.any(t > self.t_end):
            raise DomainError(f"t must lie in [{lo}, {self.t_end}], got {t}")
        return t

    def beta(self, t):
        t = self._check_t(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def log_alpha_bar(self, t):
        t = self._check_t(t)
        return -(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2)

    def alpha_bar(self, t):
        """Signal level of the marginal kernel ``N(sqrt(ab) x0, (1 - ab) I)``."""
        return np.exp(self.log_alpha_bar(t))

    def marginal_std(self, t):
        return np.sqrt(-np.expm1(self.log_alpha_bar(t)))

    def drift(self, x, t):
        """Forward drift ``f(x, t) = -beta(t) x / 2``."""
        b = np.asarray(self.beta(t))
        x = np.asarray(x, dtype=np.float64)
        if b.ndim == 1:
            b = b[:, None]
        return -0.5 * b * x

    def diffusion_coeff(self, t):
        """``g_t = sqrt(beta(t))``."""
        return np.sqrt(self.beta(t))


@dataclass(frozen=True)
class PerturbationSample:
    x_t: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    target_score: np.ndarray


@dataclass(frozen=True)
class SdeState:
    x: np.ndarray
    t: float


def perturb(sched: DiffusionSchedule, x0, t, rng: np.random.Generator, noise=None):
    """Draw ``x_t ~ N(sqrt(ab) x0, (1 - ab) I)`` and its denoising score target.

    ``noise`` overrides the standard-normal draw (used to pin tests).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < sched.t_eps):
        raise DomainError(f"perturbation time below t_eps={sched.t_eps}: {t.min()}")
    ab = sched.alpha_bar(t)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    else:
        noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), x0.shape).copy()
    sa = np.sqrt(ab)
    var = -np.expm1(sched.log_alpha_bar(t))
    if sa.ndim == 1:
        sa, var = sa[:, None], var[:, None]
    x_t = sa * x0 + np.sqrt(var) * noise
    target = -(x_t - sa * x0) / var
    return PerturbationSample(x_t=x_t, t=t, noise=noise, target_score=target)


def euler_maruyama_step(
    sched: DiffusionSchedule,
    state: SdeState,
    dt: float,
    score_value,
    rng: np.random.Generator,
    z=None,
) -> SdeState:
    """One reverse-time step from ``t`` to ``t - dt``.

    ``x' = x - [f(x, t) - g^2 s] dt + g sqrt(dt) z``
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    t_new = state.t - dt
    if t_new < sched.t_eps - 1e-9 * sched.t_end:
        raise DomainError(f"step would leave [t_eps, t_end]: t={state.t}, dt={dt}")
    x = np.asarray(state.x, dtype=np.float64)
    g2 = float(sched.beta(state.t))
    if z is None:
        z = rng.standard_normal(x.shape)
    x_new = x - (sched.drift(x, state.t) - g2 * np.asarray(score_value)) * dt
    x_new = x_new + np.sqrt(g2 * dt) * z
    return SdeState(x=x_new, t=max(t_new, sched.t_eps))


def reverse_sample(
    sched: DiffusionSchedule,
    score_fn: ScoreFn,
    n_steps: int,
    n_samples: int,
    dim: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Integrate the reverse SDE from ``t_end`` down to ``t_eps``.

    Starts from the standard-normal prior and uses a uniform grid.
    ``score_fn(x, t)`` receives the whole ``(n_samples, dim)`` batch.
    """
    if n_steps < 1:
        raise DomainError(f"n_steps must be >= 1, got {n_steps}")
    dt = (sched.t_end - sched.t_eps) / n_steps
    state = SdeState(x=rng.standard_normal((n_samples, dim)), t=sched.t_end)
    for i in range(n_steps):
        t = sched.t_end - i * dt
        state = SdeState(state.x, t)
        state = euler_maruyama_step(sched, state, dt, score_fn(state.x, t), rng)
    return state.x

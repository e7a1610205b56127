"""Variational lower bound on ``log p(x0)`` for a score field.

    L(x0) = E[log p_T(x_T)]
            - int_{t_eps}^{t_end} E[ g^2 |s|^2 / 2 + div(g^2 s - f) ] dt

with ``x_t`` drawn from the forward kernel started at ``x0``. The interval
``[0, t_eps)`` is dropped. Divergences use central finite differences, either
per coordinate or along Rademacher probes (Hutchinson).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .compose import evaluate
from .errors import DomainError, NumericError
from .network import ScoreNet
from .sde import DiffusionSchedule, perturb

METHODS = ("exact-fd", "hutchinson")


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    n_mc: int
    n_time: int
    divergence_method: str

    def report(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n_mc": self.n_mc,
            "n_time": self.n_time,
            "method": self.divergence_method,
        }


def divergence(score_fn, x, t, method="exact-fd", rng=None, n_probe=64):
    """``sum_i d s_i / d x_i`` per row of ``x`` (shape ``(n, d)`` -> ``(n,)``)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if method == "exact-fd":
        h = 1e-3 * (1.0 + np.abs(x))
        # all 2d shifted copies go through score_fn in one batch
        eye = np.eye(d)
        shift = h[:, None, :] * eye[None]
        xp = (x[:, None, :] + shift).reshape(n * d, d)
        xm = (x[:, None, :] - shift).reshape(n * d, d)
        t_rep = np.repeat(t, d) if np.ndim(t) else t
        sp = np.asarray(score_fn(xp, t_rep)).reshape(n, d, d)
        sm = np.asarray(score_fn(xm, t_rep)).reshape(n, d, d)
        with np.errstate(invalid="ignore"):
            diag = np.einsum("nii->ni", sp - sm)
        out = (diag / (2 * h)).sum(axis=1)
    elif method == "hutchinson":
        if rng is None:
            raise DomainError("hutchinson divergence needs an rng")
        v = rng.choice([-1.0, 1.0], size=(n, n_probe, d))
        h = 1e-3 * (1.0 + np.abs(x).max(axis=1))[:, None, None]
        xp = (x[:, None, :] + h * v).reshape(n * n_probe, d)
        xm = (x[:, None, :] - h * v).reshape(n * n_probe, d)
        t_rep = np.repeat(t, n_probe) if np.ndim(t) else t
        with np.errstate(invalid="ignore"):
            jv = (np.asarray(score_fn(xp, t_rep)) - np.asarray(score_fn(xm, t_rep))).reshape(n, n_probe, d)
        jv = jv / (2 * h)
        out = np.einsum("npd,npd->np", v, jv).mean(axis=1)
    else:
        raise DomainError(f"unknown divergence method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite divergence at t={t}")
    return out


def _log_std_normal(x):
    d = x.shape[1]
    return -0.5 * (np.sum(x**2, axis=1) + d * np.log(2 * np.pi))


def elbo(score_fn, sched: DiffusionSchedule, x0, n_mc: int, n_time: int,
         rng: np.random.Generator, method="exact-fd", n_probe=16) -> ElboEstimate:
    """Monte-Carlo VLB for one datum.

    Each of the ``n_mc`` replicas draws one ``x_T`` for the prior term and one
    ``(t, x_t)`` per time stratum; the reported error is the replica std
    divided by ``sqrt(n_mc)``.
    """
    if n_mc < 1 or n_time < 1:
        raise DomainError("n_mc and n_time must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    d = x0.size
    span = sched.t_end - sched.t_eps
    width = span / n_time

    xT = perturb(sched, np.tile(x0, (n_mc, 1)), sched.t_end, rng).x_t
    values = _log_std_normal(xT)

    lo = sched.t_eps + width * np.arange(n_time)
    t = (lo[None, :] + width * rng.random((n_mc, n_time))).reshape(-1)
    t = np.clip(t, sched.t_eps, sched.t_end)
    x_t = perturb(sched, np.tile(x0, (n_mc * n_time, 1)), t, rng).x_t
    g2 = sched.beta(t)
    s = np.asarray(score_fn(x_t, t))
    div_s = divergence(score_fn, x_t, t, method=method, rng=rng, n_probe=n_probe)
    # div(g^2 s - f) = g^2 div(s) + beta d / 2
    integrand = 0.5 * g2 * np.sum(s**2, axis=1) + g2 * div_s + 0.5 * g2 * d
    values = values - width * integrand.reshape(n_mc, n_time).sum(axis=1)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite ELBO replicas")
    se = float(values.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return ElboEstimate(float(values.mean()), se, n_mc, n_time, method)


def dataset_elbo(estimates) -> float:
    """Mean of per-datum bounds: the Monte-Carlo estimate of the expected bound."""
    return float(np.mean([e.value for e in estimates]))


def model_elbo(ckpt, x0, recipe, n_mc: int, n_time: int, rng: np.random.Generator,
               method="exact-fd", n_probe=16) -> ElboEstimate:
    """Bound for a trained checkpoint under a composite recipe.

    The network is evaluated in float64 so the finite-difference divergence
    is not dominated by single-precision rounding.
    """
    net = ckpt.model()
    net = ScoreNet(net.config, net.schedule, net.params.to(torch.float64))
    fn = lambda x, t: evaluate(recipe, net.score, x, t)  # noqa: E731
    return elbo(fn, net.schedule, x0, n_mc, n_time, rng, method=method, n_probe=n_probe)

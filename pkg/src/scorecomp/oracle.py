"""Built-in self-checks against closed-form answers.

Each check returns ``(name, passed, detail)``. ``perturb_fn`` can be swapped
out to confirm that the suite actually catches a broken kernel.
"""
from __future__ import annotations

import numpy as np

from .likelihood import divergence, elbo
from .sde import DiffusionSchedule, perturb, reverse_sample
from .targets import GaussianMixtureTarget, analytic_logpdf, analytic_score


def _kernel_stats(sched, perturb_fn, rng):
    n, x0 = 100_000, np.array([1.0, -1.0])
    worst_mean, worst_var, ok = 0.0, 0.0, True
    for t in (0.25, 0.5, 0.75):
        ab = sched.alpha_bar(t)
        x = perturb_fn(sched, np.tile(x0, (n, 1)), t, rng).x_t
        mean_err = np.abs(x.mean(0) - np.sqrt(ab) * x0).max()
        var_err = np.abs(x.var(0) / (1 - ab) - 1).max()
        ok &= mean_err < 4 * np.sqrt((1 - ab) / n) and var_err < 0.03
        worst_mean, worst_var = max(worst_mean, mean_err), max(worst_var, var_err)
    return "kernel-moments", bool(ok), f"mean err {worst_mean:.2e}, var rel err {worst_var:.2e}"


def _score_identity(sched, perturb_fn, rng):
    n = 10_000
    t = rng.uniform(sched.t_eps, sched.t_end, size=n)
    ps = perturb_fn(sched, rng.normal(size=(n, 2)), t, rng)
    resid = np.abs(ps.target_score + ps.noise / np.sqrt(1 - sched.alpha_bar(t))[:, None]).max()
    return "score-target-identity", bool(resid <= 1e-6), f"max residual {resid:.2e}"


def _em_gaussians(sched, perturb_fn, rng):
    details, ok = [], True
    for mean, var in (([0.0, 0.0], 1.0), ([1.5, -0.5], 0.25)):
        target = GaussianMixtureTarget.isotropic([mean], var)
        x = reverse_sample(sched, lambda x, t: analytic_score(target, x, t, sched), 1000, 10_000, 2, rng)
        mu_err = np.abs(x.mean(0) - mean).max()
        cov = var * np.eye(2)
        cov_err = np.linalg.norm(np.cov(x.T) - cov) / np.linalg.norm(cov)
        ok &= mu_err < 0.05 and cov_err < 0.10
        details.append(f"{mu_err:.3f}/{cov_err:.3f}")
    return "em-gaussian-moments", bool(ok), "mean/cov err " + ", ".join(details)


def _divergence_trace(sched, perturb_fn, rng):
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    x = rng.normal(size=(16, 2))
    err = np.abs(divergence(lambda x, t: x @ A.T, x, 0.5) - 5.0).max()
    const = np.abs(divergence(lambda x, t: np.full_like(x, 2.0), x, 0.5)).max()
    return "divergence-trace", bool(err <= 1e-6 and const == 0), f"trace err {err:.1e}"


def _mixture_score_fd(sched, perturb_fn, rng):
    target = GaussianMixtureTarget([0.4, 0.6], [[-1.0, 0.0], [1.0, 1.0]],
                                   [np.eye(2) * 0.5, [[0.8, 0.3], [0.3, 0.6]]])
    x, t, h = rng.normal(size=(20, 2)), 0.3, 1e-5
    fd = np.stack([
        (analytic_logpdf(target, x + h * e, t, sched) - analytic_logpdf(target, x - h * e, t, sched)) / (2 * h)
        for e in np.eye(2)
    ], axis=1)
    err = np.abs(analytic_score(target, x, t, sched) - fd).max()
    return "mixture-score-fd", bool(err <= 1e-5), f"max err {err:.1e}"


def _elbo_gaussian(sched, perturb_fn, rng):
    est = elbo(lambda x, t: -x, sched, np.zeros(2), 1000, 20, rng)
    gap = abs(est.value + np.log(2 * np.pi))
    return "elbo-gaussian", bool(gap <= 3 * est.std_error), f"{est.value:.4f} +- {est.std_error:.4f}"


CHECKS = (_kernel_stats, _score_identity, _em_gaussians, _divergence_trace, _mixture_score_fd, _elbo_gaussian)


def run_suite(seed: int = 0, perturb_fn=perturb, sched: DiffusionSchedule | None = None):
    sched = sched or DiffusionSchedule()
    streams = np.random.SeedSequence(seed).spawn(len(CHECKS))
    return [check(sched, perturb_fn, np.random.default_rng(s)) for check, s in zip(CHECKS, streams)]


def format_report(results) -> str:
    width = max(len(name) for name, _, _ in results)
    lines = [f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}" for name, ok, detail in results]
    return "\n".join(lines)

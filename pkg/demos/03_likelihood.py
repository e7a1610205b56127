"""
Likelihood bounds from a score
==============================

The variational bound turns any score field into a lower bound on log p(x0).
With the exact score of N(0, I) the bound is tight, so it can be checked
against the closed-form density.
"""

# %%
import numpy as np

from scorecomp import DiffusionSchedule, GaussianMixtureTarget, analytic_logpdf, divergence, elbo

sched = DiffusionSchedule()
rng = np.random.default_rng(0)

# %%
# Divergence first. For a linear field the trace is exact; Hutchinson probes
# agree on average.
A = np.array([[1.0, 2.0], [3.0, 4.0]])
field = lambda x, t: x @ A.T
x = rng.normal(size=(500, 2))
print("exact-fd   ", divergence(field, x, 0.5).mean())
print("hutchinson ", divergence(field, x, 0.5, "hutchinson", rng, n_probe=32).mean())

# %%
# The bound at the origin should match -log(2 pi).
est = elbo(lambda x, t: -x, sched, np.zeros(2), n_mc=2000, n_time=50, rng=rng)
print(f"ELBO {est.value:.4f} +- {est.std_error:.4f}   log p {-np.log(2 * np.pi):.4f}")

# %%
# Away from the origin, and for a score that is only approximately right.
target = GaussianMixtureTarget.standard_normal(2)
for x0 in ([1.0, 0.0], [0.0, 2.0], [-1.5, 1.5]):
    x0 = np.asarray(x0)
    exact = analytic_logpdf(target, x0[None], 0.0, sched)[0]
    good = elbo(lambda x, t: -x, sched, x0, 500, 20, rng)
    off = elbo(lambda x, t: -0.8 * x, sched, x0, 500, 20, rng)
    print(f"x0={x0}: log p {exact:.3f}  exact score {good.value:.3f}  scaled score {off.value:.3f}")

# %%
# For a trained checkpoint use model_elbo (or the ``elbo`` subcommand), which
# evaluates the network in double precision.
print(est.report())

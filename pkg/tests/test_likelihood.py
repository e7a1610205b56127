import numpy as np
import pytest

from scorecomp.compose import decomposition_recipe
from scorecomp.errors import DomainError, NumericError
from scorecomp.likelihood import dataset_elbo, divergence, elbo, model_elbo
from scorecomp.network import NetConfig
from scorecomp.sde import DiffusionSchedule
from scorecomp.targets import GaussianMixtureTarget, analytic_logpdf, analytic_score
from scorecomp.trainer import TrainConfig, train

SCHED = DiffusionSchedule()
A = np.array([[1.0, 2.0], [3.0, 4.0]])


def minus_x(x, t):
    return -x


def test_linear_field_trace():
    x = np.random.default_rng(0).normal(size=(7, 2))
    np.testing.assert_allclose(divergence(lambda x, t: x @ A.T, x, 0.5), 5.0, atol=1e-6)


def test_constant_field_has_zero_divergence():
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.all(divergence(lambda x, t: np.ones_like(x) * 3.0, x, 0.5) == 0)


def test_hutchinson_on_linear_field():
    # v^T A v = tr(A) + sum_{i != j} A_ij v_i v_j; the cross term has variance 25 for this A
    rng = np.random.default_rng(2)
    got = divergence(lambda x, t: x @ A.T, np.zeros((200, 2)), 0.5, "hutchinson", rng, n_probe=64)
    assert abs(got.mean() - 5.0) < 4 * 5 / np.sqrt(64 * 200)


def _smooth_field(seed):
    rng = np.random.default_rng(seed)
    W, b, V = rng.normal(size=(8, 2)), rng.normal(size=8), rng.normal(size=(2, 8))
    return lambda x, t: np.tanh(x @ W.T + b) @ V.T - x


@pytest.mark.parametrize("seed", range(5))
def test_hutchinson_matches_exact_fd(seed):
    f = _smooth_field(seed)
    x = np.random.default_rng(10 + seed).normal(size=(50, 2))
    exact = divergence(f, x, 0.3)
    hutch = divergence(f, x, 0.3, "hutchinson", np.random.default_rng(seed), n_probe=64)
    # mean over points: per-point probe noise averages out
    assert abs(hutch.mean() - exact.mean()) <= 0.05 * abs(exact.mean())


def test_divergence_errors():
    with pytest.raises(DomainError):
        divergence(minus_x, np.zeros((1, 2)), 0.5, "hutchinson")
    with pytest.raises(DomainError):
        divergence(minus_x, np.zeros((1, 2)), 0.5, "jacobian")
    with pytest.raises(NumericError):
        divergence(lambda x, t: np.full_like(x, np.inf), np.ones((1, 2)), 0.5)


def test_elbo_of_oracle_at_origin():
    est = elbo(minus_x, SCHED, np.zeros(2), n_mc=2000, n_time=50, rng=np.random.default_rng(3))
    assert abs(est.value + np.log(2 * np.pi)) <= 3 * est.std_error
    assert est.report()["method"] == "exact-fd"


def test_elbo_bound_over_random_points():
    target = GaussianMixtureTarget.standard_normal(2)
    rng = np.random.default_rng(4)
    for x0 in rng.normal(size=(20, 2)) * 1.5:
        est = elbo(minus_x, SCHED, x0, n_mc=200, n_time=20, rng=rng)
        assert est.value <= analytic_logpdf(target, x0[None], 0.0, SCHED)[0] + 3 * est.std_error


def test_elbo_bound_for_shifted_gaussian():
    target = GaussianMixtureTarget.isotropic([[1.0, -0.5]], 0.5)
    rng = np.random.default_rng(5)
    x0 = np.array([0.7, 0.1])
    est = elbo(lambda x, t: analytic_score(target, x, t, SCHED), SCHED, x0, 400, 25, rng)
    exact = analytic_logpdf(target, x0[None], 0.0, SCHED)[0]
    assert est.value <= exact + 3 * est.std_error
    # the oracle score makes the bound tight up to the dropped [0, t_eps) piece
    assert abs(est.value - exact) < 0.1


def test_standard_error_scaling():
    ratios = []
    for seed in range(5):
        a = elbo(minus_x, SCHED, np.ones(2), 400, 10, np.random.default_rng(seed))
        b = elbo(minus_x, SCHED, np.ones(2), 800, 10, np.random.default_rng(100 + seed))
        ratios.append(b.std_error / a.std_error)
    assert np.mean(ratios) == pytest.approx(1 / np.sqrt(2), rel=0.2)


def test_stratification_granularity():
    fine = elbo(minus_x, SCHED, np.ones(2), 100, 40, np.random.default_rng(6))
    coarse = elbo(minus_x, SCHED, np.ones(2), 400, 10, np.random.default_rng(7))
    assert abs(fine.value - coarse.value) <= 3 * np.hypot(fine.std_error, coarse.std_error)


def test_dataset_elbo_is_mean_of_per_datum_bounds():
    rng = np.random.default_rng(8)
    ests = [elbo(minus_x, SCHED, x0, 20, 5, rng) for x0 in rng.normal(size=(4, 2))]
    assert dataset_elbo(ests) == pytest.approx(np.mean([e.value for e in ests]), rel=1e-15)


def test_elbo_rejects_empty_sampling():
    with pytest.raises(DomainError):
        elbo(minus_x, SCHED, np.zeros(2), 0, 5, np.random.default_rng(0))


def test_model_elbo_runs_on_checkpoint():
    net = NetConfig(d=2, d_z=4, hidden_width=16, n_blocks=1, time_embed_dim=8, group_size=4, K=2)
    ck = train(np.array([[0.0, 1.0], [1.0, 0.0]]), TrainConfig(iterations=5, batch_size=4, net=net))
    x0 = np.array([0.0, 1.0])
    est = model_elbo(ck, x0, decomposition_recipe(ck.model().encode(x0)), 10, 5, np.random.default_rng(0))
    assert np.isfinite(est.value) and est.std_error > 0 and est.n_mc == 10

import numpy as np
import pytest

from scorecomp.errors import DataError, DomainError, NumericError
from scorecomp.sde import DiffusionSchedule
from scorecomp.targets import (
    Dataset,
    GaussianMixtureTarget,
    analytic_logpdf,
    analytic_score,
    load_dataset,
    sample_target,
    save_dataset,
    write_pgm,
)

SCHED = DiffusionSchedule()


@pytest.fixture
def mixture():
    return GaussianMixtureTarget(
        weights=[0.3, 0.7],
        means=[[-1.0, 0.5], [2.0, -1.0]],
        covariances=[[[0.5, 0.2], [0.2, 0.3]], [[1.2, -0.4], [-0.4, 0.8]]],
    )


def _brute_logpdf(target, x, t):
    # independent evaluation through explicit inverses and determinants
    ab = SCHED.alpha_bar(t)
    total = 0.0
    for w, m, c in zip(target.weights, target.means, target.covariances):
        cov = ab * c + (1 - ab) * np.eye(len(m))
        diff = x - np.sqrt(ab) * m
        q = diff @ np.linalg.inv(cov) @ diff
        total += w * np.exp(-0.5 * q) / np.sqrt(np.linalg.det(2 * np.pi * cov))
    return np.log(total)


def test_target_validation():
    with pytest.raises(DomainError):
        GaussianMixtureTarget([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(DomainError):
        GaussianMixtureTarget([1.0], [[0.0, 0.0]], [[[1.0, 0.0], [0.0, -1.0]]])
    with pytest.raises(DomainError):
        GaussianMixtureTarget([1.0], [[0.0, 0.0]], [[[1.0, 0.5], [0.0, 1.0]]])


@pytest.mark.parametrize("t", [0.0, 0.2, 0.9])
def test_standard_normal_score_is_minus_x(t):
    x = np.random.default_rng(0).normal(size=(20, 3))
    s = analytic_score(GaussianMixtureTarget.standard_normal(3), x, t, SCHED)
    np.testing.assert_allclose(s, -x, atol=1e-12)


def test_single_isotropic_component_score():
    mu, var, t = np.array([1.0, -2.0]), 0.3, 0.4
    x = np.random.default_rng(1).normal(size=(10, 2))
    ab = SCHED.alpha_bar(t)
    expected = -(x - np.sqrt(ab) * mu) / (ab * var + 1 - ab)
    s = analytic_score(GaussianMixtureTarget.isotropic([mu], var), x, t, SCHED)
    np.testing.assert_allclose(s, expected, rtol=1e-12)


def test_logpdf_matches_brute_force(mixture):
    x = np.random.default_rng(2).normal(size=(15, 2)) * 2
    for t in (0.0, 0.3, 0.8):
        lp = analytic_logpdf(mixture, x, t, SCHED)
        np.testing.assert_allclose(lp, [_brute_logpdf(mixture, xi, t) for xi in x], rtol=1e-10)


def test_mixture_score_matches_finite_differences(mixture):
    x = np.random.default_rng(3).normal(size=(25, 2)) * 1.5
    t, h = 0.3, 1e-5
    fd = np.empty_like(x)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[:, i] = (
            np.array([_brute_logpdf(mixture, xi + e, t) for xi in x])
            - np.array([_brute_logpdf(mixture, xi - e, t) for xi in x])
        ) / (2 * h)
    s = analytic_score(mixture, x, t, SCHED)
    np.testing.assert_allclose(s, fd, atol=1e-5)
    rel = np.abs(s - fd) / np.maximum(np.abs(fd), 1.0)
    assert rel.max() <= 1e-5


def test_score_at_zero_is_undiffused(mixture):
    x = np.random.default_rng(4).normal(size=(5, 2))
    h = 1e-6
    for xi, si in zip(x, analytic_score(mixture, x, 0.0, SCHED)):
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (_brute_logpdf(mixture, xi + e, 0.0) - _brute_logpdf(mixture, xi - e, 0.0)) / (2 * h)
            assert si[i] == pytest.approx(fd, abs=1e-6)


def test_score_approaches_minus_x_at_t_end(mixture):
    grid = np.stack(np.meshgrid(np.linspace(-3, 3, 7), np.linspace(-3, 3, 7)), -1).reshape(-1, 2)
    errs = [np.abs(analytic_score(mixture, grid, t, SCHED) + grid).max() for t in (0.6, 0.8, 1.0)]
    assert errs[0] > errs[1] > errs[2]
    # deviation is driven by the residual signal sqrt(alpha_bar) * mean
    assert errs[2] < 3 * np.sqrt(SCHED.alpha_bar(1.0)) * (np.abs(mixture.means).max() + 1)


def test_per_row_times_match_scalar_calls(mixture):
    x = np.random.default_rng(5).normal(size=(6, 2))
    t = np.array([0.1, 0.5, 0.1, 0.9, 0.5, 0.3])
    batched = analytic_score(mixture, x, t, SCHED)
    single = np.stack([analytic_score(mixture, x[i : i + 1], t[i], SCHED)[0] for i in range(6)])
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_standard_normal_logpdf_at_origin():
    lp = analytic_logpdf(GaussianMixtureTarget.standard_normal(2), np.zeros((1, 2)), 0.37, SCHED)
    assert lp[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert lp[0] == pytest.approx(-1.837877, abs=1e-6)


def test_degenerate_weights_reduce_to_component():
    mix = GaussianMixtureTarget([1.0, 0.0], [[0.5, 0.5], [3.0, 3.0]], [np.eye(2), 2 * np.eye(2)])
    single = GaussianMixtureTarget.isotropic([[0.5, 0.5]], 1.0)
    x = np.random.default_rng(6).normal(size=(8, 2))
    np.testing.assert_allclose(
        analytic_logpdf(mix, x, 0.2, SCHED), analytic_logpdf(single, x, 0.2, SCHED), rtol=1e-14
    )


def test_density_integrates_to_one(mixture):
    g = np.linspace(-9, 9, 721)
    xx, yy = np.meshgrid(g, g)
    pts = np.c_[xx.ravel(), yy.ravel()]
    dens = np.exp(analytic_logpdf(mixture, pts, 0.3, SCHED)).reshape(xx.shape)
    mass = np.trapezoid(np.trapezoid(dens, g, axis=1), g)
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_nonfinite_probe_rejected(mixture):
    with pytest.raises(NumericError):
        analytic_score(mixture, np.array([[np.nan, 0.0]]), 0.5, SCHED)


def test_sampling_moments_and_occupancy(mixture):
    rng = np.random.default_rng(7)
    assert sample_target(mixture, 1, rng).shape == (1, 2)
    n = 100_000
    x, comp = sample_target(mixture, n, rng, return_components=True)
    mean = mixture.mean()
    diff = mixture.means - mean
    cov = sum(w * (c + np.outer(m, m)) for w, c, m in zip(mixture.weights, mixture.covariances, diff))
    sigma = np.sqrt(np.diag(cov))
    assert np.all(np.abs(x.mean(0) - mean) < 4 * sigma / np.sqrt(n))
    np.testing.assert_allclose(np.bincount(comp) / n, mixture.weights, atol=0.01)


def test_csv_loading(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("# comment\n0.0,1.0\n2.0,3.0\n")
    ds = load_dataset(p)
    assert ds.points.shape == (2, 2)
    np.testing.assert_array_equal(ds.points, [[0, 1], [2, 3]])


@pytest.mark.parametrize(
    "text, fragment",
    [("1,2\n3\n", ":2:"), ("1,2\nx,3\n", ":2:"), ("", "no data"), ("# only\n", "no data")],
)
def test_csv_errors(tmp_path, text, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=fragment):
        load_dataset(p)


def test_pgm_dir(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.full((4, 5), 255, dtype=np.uint8))
    write_pgm(tmp_path / "b.pgm", np.zeros((4, 5), dtype=np.uint8))
    ds = load_dataset(tmp_path)
    assert ds.kind == "image" and ds.image_shape == (4, 5)
    np.testing.assert_array_equal(ds.points[0], 1.0)
    np.testing.assert_array_equal(ds.points[1], -1.0)


def test_pgm_inconsistent_shapes(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((4, 4), dtype=np.uint8))
    write_pgm(tmp_path / "b.pgm", np.zeros((3, 4), dtype=np.uint8))
    with pytest.raises(DataError, match="b.pgm"):
        load_dataset(tmp_path)


def test_pgm_truncated(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(DataError, match="pixels"):
        load_dataset(tmp_path)


def test_tensor_bin_roundtrip(tmp_path):
    pts = sample_target(GaussianMixtureTarget.standard_normal(3), 50, np.random.default_rng(0))
    ds = Dataset(pts)
    save_dataset(ds, tmp_path / "d.scmp")
    back = load_dataset(tmp_path / "d.scmp")
    assert back.points.tobytes() == ds.points.tobytes()
    assert back.kind == ds.kind


def test_tensor_bin_corruption(tmp_path):
    save_dataset(Dataset(np.ones((3, 2))), tmp_path / "d.scmp")
    blob = (tmp_path / "d.scmp").read_bytes()
    (tmp_path / "t.scmp").write_bytes(blob[:-6])
    with pytest.raises(DataError):
        load_dataset(tmp_path / "t.scmp")


def test_missing_file():
    with pytest.raises(DataError):
        load_dataset("/nonexistent/path.csv")

import numpy as np
import pytest
import torch
from scipy.spatial.distance import pdist

from scorecomp.errors import ConfigError, ShapeMismatchError
from scorecomp.network import (
    NetConfig,
    ParamStore,
    ScoreNet,
    adagn,
    check_shapes,
    encode,
    forward_score,
    grad,
    group_normalize,
    init_params,
    modulate,
    param_shapes,
    time_embed,
)
from scorecomp.sde import DiffusionSchedule
from scorecomp.trainer import TrainConfig, batch_loss

SCHED = DiffusionSchedule()
SMALL = NetConfig(d=2, d_z=4, hidden_width=16, n_blocks=2, time_embed_dim=8, group_size=4, K=3)


def randomized(cfg, seed, dtype=torch.float64):
    """Initialized params with every entry perturbed, so no gradient is structurally zero."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng, dtype)
    return ParamStore((k, v + 0.3 * torch.as_tensor(rng.normal(size=v.shape), dtype=dtype)) for k, v in p.items())


def test_netconfig_validation():
    with pytest.raises(ConfigError):
        NetConfig(hidden_width=30, group_size=8)
    with pytest.raises(ConfigError):
        NetConfig(K=0)
    with pytest.raises(ConfigError):
        NetConfig(time_embed_dim=7)


def test_param_count_is_deterministic():
    a = init_params(SMALL, np.random.default_rng(0))
    b = init_params(SMALL, np.random.default_rng(1))
    assert a.n_params == b.n_params == sum(int(np.prod(s)) for s in param_shapes(SMALL).values())
    assert a.n_params <= 5000
    assert a.names() == b.names()


def test_time_embed_at_zero():
    e = time_embed(torch.tensor([0.0]), 16)[0]
    assert e.shape == (16,)
    assert torch.all(e[:8] == 0) and torch.all(e[8:] == 1)


def test_time_embed_odd_dim():
    with pytest.raises(ConfigError):
        time_embed(0.5, 7)


def test_time_embed_injective_on_grid():
    t = torch.linspace(1e-3, 1.0, 1000, dtype=torch.float64)
    e = time_embed(t, 32).numpy()
    assert pdist(e).min() > 0


def test_group_normalize_constant_input():
    out = group_normalize(torch.full((3, 16), 2.5), 4)
    assert torch.all(out == 0)


def test_group_normalize_statistics():
    h = 3 * torch.randn(10, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    g = group_normalize(h, 8).reshape(10, 4, 8)
    assert g.mean(-1).abs().max() < 1e-12
    assert (g.var(-1, unbiased=False) - 1).abs().max() < 1e-4


def test_group_normalize_affine_invariance():
    gen = torch.Generator().manual_seed(1)
    h = 3 * torch.randn(5, 16, dtype=torch.float64, generator=gen)
    scale = 1e3 * (1 + torch.rand(5, 4, 1, dtype=torch.float64, generator=gen))
    shift = torch.randn(5, 4, 1, dtype=torch.float64, generator=gen)
    h2 = (h.reshape(5, 4, 4) * scale + shift).reshape(5, 16)
    diff = (group_normalize(h2, 4) - group_normalize(h, 4)).abs().max()
    # only the 1e-5 variance floor breaks exact invariance
    assert diff < 1e-4


def test_group_normalize_divisibility():
    with pytest.raises(ConfigError):
        group_normalize(torch.zeros(2, 10), 4)


def test_adagn_identity_and_zero():
    h = torch.randn(4, 16, dtype=torch.float64)
    ones, zeros = torch.ones(4, 16, dtype=torch.float64), torch.zeros(4, 16, dtype=torch.float64)
    assert torch.equal(adagn(h, ones, zeros, ones, 4), group_normalize(h, 4))
    assert torch.all(adagn(h, ones, zeros, zeros, 4) == 0)


def test_adagn_linearity():
    gen = torch.Generator().manual_seed(2)
    h, ts, tb, zs, zs2 = (torch.randn(3, 16, dtype=torch.float64, generator=gen) for _ in range(5))
    np.testing.assert_allclose(adagn(h, ts, tb, 2 * zs, 4), 2 * adagn(h, ts, tb, zs, 4), rtol=1e-14)
    np.testing.assert_allclose(
        adagn(h, ts, tb, zs + zs2, 4), adagn(h, ts, tb, zs, 4) + adagn(h, ts, tb, zs2, 4), atol=1e-12
    )
    ts2, tb2 = torch.randn(3, 16, dtype=torch.float64), torch.randn(3, 16, dtype=torch.float64)
    np.testing.assert_allclose(
        adagn(h, ts + ts2, tb + tb2, zs, 4), adagn(h, ts, tb, zs, 4) + adagn(h, ts2, tb2, zs, 4), atol=1e-12
    )


def test_modulate_shape_mismatch():
    p = init_params(SMALL, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        modulate(p, 0, torch.zeros(2, 16), torch.zeros(2, 16), torch.zeros(2, 5), 4)


def test_forward_score_shape_and_determinism():
    p = randomized(SMALL, 0, torch.float32)
    x = np.random.default_rng(0).normal(size=(7, 2))
    z = np.random.default_rng(1).normal(size=4)
    a = forward_score(p, SMALL, SCHED, x, 0.3, z)
    b = forward_score(p, SMALL, SCHED, x, 0.3, z)
    assert a.shape == (7, 2)
    assert torch.equal(a, b)
    per_row = forward_score(p, SMALL, SCHED, x, torch.full((7,), 0.3), np.tile(z, (7, 1)))
    assert torch.equal(a, per_row)


def test_forward_score_rejects_wrong_dimension():
    p = init_params(SMALL, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        forward_score(p, SMALL, SCHED, np.zeros((3, 5)), 0.3, np.zeros(4))


def test_initial_score_is_zero():
    net = ScoreNet.initialize(SMALL, SCHED, np.random.default_rng(0))
    assert np.all(net.score(np.ones((3, 2)), 0.5, np.ones(4)) == 0)


def test_encode_shapes_and_determinism():
    cfg = NetConfig(d=2, d_z=16, hidden_width=32, n_blocks=1, time_embed_dim=8, group_size=8, K=3)
    net = ScoreNet.initialize(cfg, SCHED, np.random.default_rng(0))
    b = net.encode(np.array([0.5, -0.5]))
    assert b.latents.shape == (3, 16)
    assert np.array_equal(b.latents, net.encode(np.array([0.5, -0.5])).latents)
    assert net.encode_batch(np.zeros((4, 2))).shape == (4, 3, 16)
    with pytest.raises(ConfigError):
        encode(net.params, cfg, np.zeros((1, 3)))


def test_check_shapes():
    p = init_params(SMALL, np.random.default_rng(0))
    check_shapes(p, SMALL)
    with pytest.raises(ShapeMismatchError):
        check_shapes(p, NetConfig(d=2, d_z=4, hidden_width=16, n_blocks=2, time_embed_dim=8, group_size=4, K=5))


def test_grad_of_half_squared_norm_is_identity():
    p = randomized(SMALL, 3)
    g = grad(p, lambda q: 0.5 * sum((v**2).sum() for v in q.values()))
    assert g.equal(p)


def test_grad_of_constant_is_zero():
    p = randomized(SMALL, 4)
    g = grad(p, lambda q: torch.tensor(3.0, dtype=torch.float64))
    assert all(torch.all(v == 0) for v in g.values())


def test_grad_matches_central_differences():
    cfg = TrainConfig(net=SMALL, uncond_drop_prob=0.0)
    rng = np.random.default_rng(5)
    p = randomized(SMALL, 6)
    x0 = rng.normal(size=(6, 2))
    t = rng.uniform(0.05, 1.0, size=6)
    noise = rng.normal(size=(6, 2))
    drop = np.array([False, True, False, False, True, False])

    def loss(q):
        return batch_loss(q, cfg, x0, t, noise, drop)

    g = grad(p, loss).flat().numpy()
    flat = p.flat().numpy()
    names, shapes = p.names(), [tuple(v.shape) for v in p.values()]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflat(vec):
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return ParamStore((n, torch.as_tensor(a.reshape(s))) for n, a, s in zip(names, parts, shapes))

    idx = rng.choice(flat.size, size=100, replace=False)
    h = 1e-3
    worst = 0.0
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = h
        with torch.no_grad():
            fd = (float(loss(unflat(flat + e))) - float(loss(unflat(flat - e)))) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8))
    assert worst <= 1e-4, worst

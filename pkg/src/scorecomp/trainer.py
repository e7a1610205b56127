"""Per-datum denoising score matching for the decomposed score autoencoder.

Each datum ``x0`` is encoded into K latents; the score used in the loss is
the average of the K latent-conditioned scores. With probability
``uncond_drop_prob`` a datum's latents are all replaced by the ones vector,
which trains the unconditional score on the same network.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import container
from .errors import ConfigError, IntegrityError, NumericError, ShapeMismatchError
from .network import (
    LatentBundle,
    NetConfig,
    ParamStore,
    ScoreNet,
    check_shapes,
    encode,
    forward_score,
    init_params,
    value_and_grad,
)
from .sde import DiffusionSchedule, perturb
from .targets import Dataset

CHECKPOINT_VERSION = 1
WEIGHTINGS = ("sigma2", "one")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_weighting: str = "sigma2"
    uncond_drop_prob: float = 0.1
    seed: int = 0
    log_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    net: NetConfig = field(default_factory=NetConfig)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.uncond_drop_prob < 1:
            raise ConfigError("uncond_drop_prob must lie in [0, 1)")
        if self.lambda_weighting not in WEIGHTINGS:
            raise ConfigError(f"lambda_weighting must be one of {WEIGHTINGS}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @property
    def K(self) -> int:
        return self.net.K

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = NetConfig(**d.pop("net"))
        schedule = DiffusionSchedule(**d.pop("schedule"))
        return cls(net=net, schedule=schedule, **d)


def loss_weight(sched: DiffusionSchedule, t, weighting: str):
    """``lambda_t``: ``1 - alpha_bar(t)`` for ``sigma2``, 1 for ``one``."""
    if weighting == "sigma2":
        return -np.expm1(sched.log_alpha_bar(t))
    return np.ones_like(np.asarray(t, dtype=np.float64))


def dsm_loss(score_fn, sched: DiffusionSchedule, x0, bundle: LatentBundle, t, rng,
             weighting="sigma2", noise=None) -> float:
    """Single-datum loss ``lambda_t |mean_k s(x_t, t, zeta_k) - target|^2``.

    ``score_fn(x, t, zeta)`` maps an ``(n, d)`` batch to scores; pass
    ``ScoreNet.score`` for a model or any analytic field.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    ps = perturb(sched, x0, t, rng, noise=noise)
    composite = sum(np.asarray(score_fn(ps.x_t, t, z)) for z in bundle.latents) / bundle.K
    if not np.all(np.isfinite(composite)):
        raise NumericError(f"non-finite composite score at t={t}")
    lam = loss_weight(sched, t, weighting)
    return float(lam * np.sum((composite - ps.target_score) ** 2))


def batch_loss(params: ParamStore, cfg: TrainConfig, x0, t, noise, drop) -> torch.Tensor:
    """Differentiable mean DSM loss over a batch (encoder included)."""
    net, sched = cfg.net, cfg.schedule
    dtype = params.dtype
    x0 = torch.as_tensor(x0, dtype=dtype)
    B, K = x0.shape[0], net.K
    z = encode(params, net, x0)
    z = torch.where(torch.as_tensor(drop)[:, None, None], torch.ones_like(z), z)
    ab = sched.alpha_bar(t)
    var = -np.expm1(sched.log_alpha_bar(t))
    sa = torch.as_tensor(np.sqrt(ab), dtype=dtype)[:, None]
    std = torch.as_tensor(np.sqrt(var), dtype=dtype)[:, None]
    eps = torch.as_tensor(noise, dtype=dtype)
    x_t = sa * x0 + std * eps
    t_rep = torch.as_tensor(np.repeat(t, K), dtype=dtype)
    s = forward_score(params, net, sched, x_t.repeat_interleave(K, dim=0), t_rep, z.reshape(B * K, -1))
    s = s.reshape(B, K, -1).mean(dim=1)
    if cfg.lambda_weighting == "sigma2":
        # lambda |s + eps/std|^2 == |std s + eps|^2
        per = ((std * s + eps) ** 2).sum(dim=-1)
    else:
        per = ((s + eps / std) ** 2).sum(dim=-1)
    return per.mean()


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamStore, **kw) -> "AdamState":
        zeros = lambda: ParamStore((k, torch.zeros_like(v)) for k, v in params.items())  # noqa: E731
        return cls(zeros(), zeros(), **kw)


def adam_update(params: ParamStore, grads: ParamStore, state: AdamState, lr: float):
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (torch.sqrt(v / c2) + state.eps_hat)
        new_m[k], new_v[k] = m, v
    new_state = AdamState(ParamStore(new_m), ParamStore(new_v), step, b1, b2, state.eps_hat)
    return ParamStore(new_p), new_state


def draw_step_randomness(cfg: TrainConfig, n_data: int, rng: np.random.Generator):
    """Minibatch indices, times, noise and drop mask for one step, in a fixed order."""
    B = cfg.batch_size
    sched = cfg.schedule
    idx = rng.integers(0, n_data, size=B)
    t = rng.uniform(sched.t_eps, sched.t_end, size=B)
    noise = rng.standard_normal((B, cfg.net.d))
    drop = rng.random(B) < cfg.uncond_drop_prob
    return idx, t, noise, drop


def train_step(params: ParamStore, adam: AdamState, batch, cfg: TrainConfig, rng):
    """One Adam step on a batch; returns ``(params, adam, loss)``."""
    batch = np.atleast_2d(np.asarray(batch))
    if batch.shape[0] < 1:
        raise ConfigError("empty batch")
    B = batch.shape[0]
    sched = cfg.schedule
    t = rng.uniform(sched.t_eps, sched.t_end, size=B)
    noise = rng.standard_normal((B, cfg.net.d))
    drop = rng.random(B) < cfg.uncond_drop_prob
    return _step(params, adam, batch, t, noise, drop, cfg)


def _step(params, adam, batch, t, noise, drop, cfg):
    try:
        loss, g = value_and_grad(params, lambda p: batch_loss(p, cfg, batch, t, noise, drop))
    except NumericError as exc:
        raise NumericError(f"{exc} (t in [{t.min():.4g}, {t.max():.4g}])") from None
    params, adam = adam_update(params, g, adam, cfg.learning_rate)
    return params, adam, loss


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamStore
    iteration: int = 0
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    def model(self) -> ScoreNet:
        return ScoreNet(self.config.net, self.config.schedule, self.params)


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    loss: float
    wallclock_s: float


def train(dataset: Dataset, cfg: TrainConfig, *, history: list | None = None,
          checkpoint_path=None) -> Checkpoint:
    """Run ``cfg.iterations`` Adam steps with uniform minibatch sampling.

    Every ``cfg.log_every`` iterations the window-mean loss is appended to
    ``history``. On a numeric failure the last good state is written to
    ``checkpoint_path`` (if given) before the error propagates.
    """
    data = np.asarray(dataset.points if isinstance(dataset, Dataset) else dataset)
    if data.ndim != 2 or len(data) == 0:
        raise ConfigError("training data must be a non-empty (N, d) array")
    if data.shape[1] != cfg.net.d:
        raise ShapeMismatchError(f"data dimension {data.shape[1]} != net.d {cfg.net.d}")
    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(cfg.net, np.random.default_rng(init_ss))
    adam = AdamState.zeros_like(params, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                                eps_hat=cfg.adam_eps)
    rng = np.random.default_rng(train_ss)
    start = time.perf_counter()
    window = []
    for it in range(cfg.iterations):
        idx, t, noise, drop = draw_step_randomness(cfg, len(data), rng)
        try:
            params, adam, loss = _step(params, adam, data[idx], t, noise, drop, cfg)
        except NumericError as exc:
            if checkpoint_path is not None:
                save_checkpoint(Checkpoint(cfg, params, it, rng.bit_generator.state), checkpoint_path)
            raise NumericError(f"iteration {it}: {exc}") from None
        window.append(loss)
        if history is not None and ((it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations):
            history.append(LossRecord(it + 1, float(np.mean(window)), time.perf_counter() - start))
            window = []
    return Checkpoint(cfg, params, cfg.iterations, rng.bit_generator.state)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """The exact container bytes :func:`save_checkpoint` writes."""
    meta = {
        "format": "scorecomp-checkpoint",
        "checkpoint_version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "rng_state": _jsonable(ckpt.rng_state),
    }
    return container.pack(meta, ckpt.params.to_numpy())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    container.atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path, expected_net: NetConfig | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    Raises :class:`IntegrityError` for corrupt files and
    :class:`ShapeMismatchError` if ``expected_net`` (or the stored config)
    disagrees with the stored tensor shapes.
    """
    meta, tensors = container.read(path)
    if meta.get("format") != "scorecomp-checkpoint":
        raise IntegrityError(f"{path}: not a checkpoint container")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {meta.get('checkpoint_version')} unsupported")
    cfg = TrainConfig.from_dict(meta["config"])
    params = ParamStore.from_numpy(tensors)
    check_shapes(params, cfg.net)
    if expected_net is not None and expected_net != cfg.net:
        try:
            check_shapes(params, expected_net)
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(f"{path}: checkpoint does not fit the requested network: {exc}") from None
    return Checkpoint(cfg, params, meta["iteration"], meta.get("rng_state"), meta["checkpoint_version"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


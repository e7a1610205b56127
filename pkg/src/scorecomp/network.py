"""Latent-conditioned score network and K-head encoder.

The score network is a residual MLP. Each block is
``h <- h + silu(AdaGN(W h + b, t, zeta))`` with

    AdaGN(u, t, zeta) = zeta_s * (t_s * GroupNorm(u) + t_b)

where ``(t_s, t_b)`` come from an MLP over a sinusoidal time embedding and
``zeta_s`` is an affine map of the latent. The head output is divided by the
marginal std ``sqrt(1 - alpha_bar(t))`` so the raw network predicts ``-eps``.

Parameters live in a :class:`ParamStore` of torch tensors; gradients are
taken with torch autograd (see :func:`grad`).
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeMismatchError
from .sde import DiffusionSchedule

GN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    d: int = 2
    d_z: int = 16
    hidden_width: int = 128
    n_blocks: int = 4
    time_embed_dim: int = 32
    group_size: int = 8
    K: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"net.{name} must be a positive integer, got {value!r}")
        if self.hidden_width % self.group_size:
            raise ConfigError(
                f"hidden_width {self.hidden_width} not divisible by group_size {self.group_size}"
            )
        if self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")


class ParamStore:
    """Ordered name -> tensor map with fixed shapes."""

    def __init__(self, entries):
        self._entries = OrderedDict(entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def names(self):
        return list(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._entries.items()}

    @property
    def n_params(self) -> int:
        return sum(v.numel() for v in self._entries.values())

    @property
    def dtype(self):
        return next(iter(self._entries.values())).dtype

    def to(self, dtype) -> "ParamStore":
        return ParamStore((k, v.detach().to(dtype).clone()) for k, v in self.items())

    def clone(self) -> "ParamStore":
        return ParamStore((k, v.detach().clone()) for k, v in self.items())

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.items()}

    @classmethod
    def from_numpy(cls, arrays, dtype=torch.float32) -> "ParamStore":
        return cls((k, torch.as_tensor(np.asarray(v)).to(dtype).clone()) for k, v in arrays.items())

    def flat(self) -> torch.Tensor:
        return torch.cat([v.detach().reshape(-1) for v in self.values()])

    def equal(self, other: "ParamStore") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(torch.equal(v, other[k]) for k, v in self.items())


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    H, E = cfg.hidden_width, cfg.time_embed_dim
    shapes = {
        "time.w": (E, H),
        "time.b": (H,),
        "lift.w": (cfg.d + E, H),
        "lift.b": (H,),
    }
    for i in range(cfg.n_blocks):
        shapes[f"block{i}.w"] = (H, H)
        shapes[f"block{i}.b"] = (H,)
        shapes[f"block{i}.temb.w"] = (H, 2 * H)
        shapes[f"block{i}.temb.b"] = (2 * H,)
        shapes[f"block{i}.zeta.w"] = (cfg.d_z, H)
        shapes[f"block{i}.zeta.b"] = (H,)
    shapes["head.w"] = (H, cfg.d)
    shapes["head.b"] = (cfg.d,)
    shapes["enc.w0"] = (cfg.d, H)
    shapes["enc.b0"] = (H,)
    shapes["enc.w1"] = (H, H)
    shapes["enc.b1"] = (H,)
    for k in range(cfg.K):
        shapes[f"enc.head{k}.w"] = (H, cfg.d_z)
        shapes[f"enc.head{k}.b"] = (cfg.d_z,)
    return shapes


def init_params(cfg: NetConfig, rng: np.random.Generator, dtype=torch.float32) -> ParamStore:
    """Fan-in scaled uniform weights; zero score head so the initial score is 0.

    Modulation biases start at ``t_s = 1, t_b = 0, zeta_s = 1``.
    """
    H = cfg.hidden_width
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head."):
            arr = np.zeros(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("temb.b"):
            arr = np.concatenate([np.ones(H), np.zeros(H)])
        elif name.endswith("zeta.b"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = arr
    return ParamStore.from_numpy(out, dtype)


def check_shapes(params: ParamStore, cfg: NetConfig) -> None:
    expected = param_shapes(cfg)
    got = params.shapes()
    if expected != got:
        diff = sorted(
            f"{k}: expected {expected.get(k)}, got {got.get(k)}"
            for k in set(expected) | set(got)
            if expected.get(k) != got.get(k)
        )
        raise ShapeMismatchError("parameter shapes do not match NetConfig: " + "; ".join(diff[:5]))


def time_embed(t, dim: int) -> torch.Tensor:
    """Sinusoidal features ``[sin(w t), cos(w t)]`` with ``w`` log-spaced in [1, 1000]."""
    if dim % 2:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    half = dim // 2
    exps = torch.linspace(0.0, 1.0, half, dtype=t.dtype) if half > 1 else torch.zeros(1, dtype=t.dtype)
    freqs = 1000.0**exps
    arg = t.reshape(-1, 1) * freqs
    emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    return emb.reshape(*t.shape, dim)


def group_normalize(h: torch.Tensor, group_size: int) -> torch.Tensor:
    """Normalize each contiguous group of ``group_size`` features."""
    width = h.shape[-1]
    if width % group_size:
        raise ConfigError(f"feature width {width} not divisible by group_size {group_size}")
    g = h.reshape(*h.shape[:-1], width // group_size, group_size)
    centered = g - g.mean(dim=-1, keepdim=True)
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return (centered * torch.rsqrt(var + GN_EPS)).reshape(h.shape)


def adagn(h, t_scale, t_shift, zeta_scale, group_size: int):
    return zeta_scale * (t_scale * group_normalize(h, group_size) + t_shift)


def modulate(params: ParamStore, block: int, h, time_hidden, zeta, group_size: int):
    """AdaGN for block ``block``: scales from the time MLP and the latent affine map."""
    ts_tb = time_hidden @ params[f"block{block}.temb.w"] + params[f"block{block}.temb.b"]
    t_scale, t_shift = ts_tb.chunk(2, dim=-1)
    if zeta.shape[-1] != params[f"block{block}.zeta.w"].shape[0]:
        raise ConfigError(
            f"latent has dimension {zeta.shape[-1]}, "
            f"expected {params[f'block{block}.zeta.w'].shape[0]}"
        )
    zeta_scale = zeta @ params[f"block{block}.zeta.w"] + params[f"block{block}.zeta.b"]
    return adagn(h, t_scale, t_shift, zeta_scale, group_size)


def _as_batch_t(t, n, dtype):
    t = torch.as_tensor(t, dtype=dtype)
    return t.expand(n) if t.ndim == 0 else t


def forward_score(params: ParamStore, cfg: NetConfig, sched: DiffusionSchedule, x, t, zeta):
    """Score ``s_theta(x, t | zeta)`` for a batch ``x`` of shape ``(n, d)``.

    ``t`` is a scalar or ``(n,)``; ``zeta`` is ``(d_z,)`` or ``(n, d_z)``.
    """
    dtype = params.dtype
    x = torch.as_tensor(x, dtype=dtype)
    if x.shape[-1] != cfg.d:
        raise ConfigError(f"input has dimension {x.shape[-1]}, network expects {cfg.d}")
    n = x.shape[0]
    t = _as_batch_t(t, n, dtype)
    zeta = torch.as_tensor(zeta, dtype=dtype)
    if zeta.ndim == 1:
        zeta = zeta.expand(n, -1)
    temb = time_embed(t, cfg.time_embed_dim)
    time_hidden = F.silu(temb @ params["time.w"] + params["time.b"])
    h = torch.cat([x, temb], dim=-1) @ params["lift.w"] + params["lift.b"]
    for i in range(cfg.n_blocks):
        u = h @ params[f"block{i}.w"] + params[f"block{i}.b"]
        u = modulate(params, i, u, time_hidden, zeta, cfg.group_size)
        h = h + F.silu(u)
    out = h @ params["head.w"] + params["head.b"]
    log_ab = -(sched.beta_min * t + 0.5 * (sched.beta_max - sched.beta_min) * t**2)
    std = torch.sqrt(-torch.expm1(log_ab))
    out = out / std[:, None]
    if not torch.isfinite(out).all():
        raise NumericError(_locate_nonfinite(params, cfg, x, temb, time_hidden, zeta))
    return out


def _locate_nonfinite(params, cfg, x, temb, time_hidden, zeta) -> str:
    with torch.no_grad():
        h = torch.cat([x, temb], dim=-1) @ params["lift.w"] + params["lift.b"]
        if not torch.isfinite(h).all():
            return "non-finite activations after the input lift"
        for i in range(cfg.n_blocks):
            u = h @ params[f"block{i}.w"] + params[f"block{i}.b"]
            h = h + F.silu(modulate(params, i, u, time_hidden, zeta, cfg.group_size))
            if not torch.isfinite(h).all():
                return f"non-finite activations in block {i}"
    return "non-finite score output in the head"


def encode(params: ParamStore, cfg: NetConfig, x) -> torch.Tensor:
    """K latents per point: shared two-layer trunk, K linear heads -> ``(n, K, d_z)``."""
    x = torch.as_tensor(x, dtype=params.dtype)
    if x.shape[-1] != cfg.d:
        raise ConfigError(f"input has dimension {x.shape[-1]}, encoder expects {cfg.d}")
    h = F.silu(x @ params["enc.w0"] + params["enc.b0"])
    h = F.silu(h @ params["enc.w1"] + params["enc.b1"])
    heads = [h @ params[f"enc.head{k}.w"] + params[f"enc.head{k}.b"] for k in range(cfg.K)]
    return torch.stack(heads, dim=-2)


def value_and_grad(params: ParamStore, loss_fn) -> tuple[float, ParamStore]:
    """Loss value and exact reverse-mode gradient of ``loss_fn(params)``."""
    leaves = ParamStore((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    loss = loss_fn(leaves)
    loss = torch.as_tensor(loss)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    if not loss.requires_grad:
        zeros = ParamStore((k, torch.zeros_like(v)) for k, v in params.items())
        return float(loss), zeros
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = ParamStore(
        (k, g if g is not None else torch.zeros_like(params[k]))
        for k, g in zip(leaves.names(), grads)
    )
    return float(loss.detach()), out


def grad(params: ParamStore, loss_fn) -> ParamStore:
    return value_and_grad(params, loss_fn)[1]


@dataclass
class LatentBundle:
    """The K latent vectors assigned to one datum, shape ``(K, d_z)``."""

    latents: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.latents, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise ConfigError(f"latent bundle must be (K, d_z) with K >= 1, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise NumericError("latent bundle contains non-finite values")
        self.latents = z

    @property
    def K(self) -> int:
        return self.latents.shape[0]

    @property
    def d_z(self) -> int:
        return self.latents.shape[1]

    def __getitem__(self, k):
        return self.latents[k]


@dataclass
class ScoreNet:
    """A configured network: config, diffusion schedule and parameters.

    The methods take and return numpy arrays; use the module-level functions
    for tensor-level (differentiable) access.
    """

    config: NetConfig
    schedule: DiffusionSchedule
    params: ParamStore

    def __post_init__(self):
        check_shapes(self.params, self.config)

    @classmethod
    def initialize(cls, config, schedule, rng, dtype=torch.float32):
        return cls(config, schedule, init_params(config, rng, dtype))

    def score(self, x, t, zeta) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 1
        with torch.no_grad():
            out = forward_score(self.params, self.config, self.schedule, np.atleast_2d(x), t, np.asarray(zeta))
        out = out.numpy().astype(np.float64)
        return out[0] if single else out

    def encode(self, x) -> LatentBundle:
        with torch.no_grad():
            z = encode(self.params, self.config, np.asarray(x)[None])[0]
        return LatentBundle(z.numpy())

    def encode_batch(self, x) -> np.ndarray:
        with torch.no_grad():
            return encode(self.params, self.config, np.atleast_2d(x)).numpy().astype(np.float64)

"""Recipes combining latent-conditioned score components.

A :class:`CompositeScore` is a plain weight/latent description:

    s(x, t) = sum_k w_k s(x, t | zeta_k) + w_u s(x, t | ones)

so it serializes into manifests and replays exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .network import LatentBundle


@dataclass(frozen=True)
class CompositeScore:
    weights: tuple[float, ...]
    latents: np.ndarray
    uncond_weight: float = 0.0
    protocol: str = "custom"
    alpha: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        z = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        if len(w) != z.shape[0]:
            raise DomainError(f"{len(w)} weights for {z.shape[0]} latents")
        if not all(np.isfinite(w)) or not np.isfinite(self.uncond_weight):
            raise DomainError("recipe weights must be finite")
        if not w and self.uncond_weight == 0:
            raise DomainError("recipe has no terms and zero unconditional weight")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "latents", z)
        object.__setattr__(self, "uncond_weight", float(self.uncond_weight))

    @property
    def d_z(self) -> int:
        return self.latents.shape[1]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights + (self.uncond_weight,))

    def manifest(self) -> dict:
        return {
            "protocol": self.protocol,
            "component_weights": list(self.weights),
            "uncond_weight": self.uncond_weight,
            "alpha": self.alpha,
            **self.meta,
        }


def unconditional_latent(d_z: int) -> np.ndarray:
    if d_z < 1:
        raise DomainError("d_z must be >= 1")
    return np.ones(d_z)


def _check_bundle(bundle: LatentBundle) -> LatentBundle:
    if not isinstance(bundle, LatentBundle):
        bundle = LatentBundle(bundle)
    return bundle


def decomposition_recipe(bundle: LatentBundle) -> CompositeScore:
    """Equal-weight average of the K components."""
    bundle = _check_bundle(bundle)
    K = bundle.K
    return CompositeScore((1.0 / K,) * K, bundle.latents, 0.0, protocol="reconstruct")


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")


def dilute(bundle: LatentBundle, ks, alpha: float, protocol="dilute") -> CompositeScore:
    """Interpolate the components ``ks`` (0-based) toward the unconditional score.

    Each diluted term gets ``alpha / K`` and the unconditional score collects
    ``len(ks) * (1 - alpha) / K``, so the weights always sum to one.
    """
    bundle = _check_bundle(bundle)
    _check_alpha(alpha)
    K = bundle.K
    ks = [int(k) for k in ks]
    if len(set(ks)) != len(ks):
        raise DomainError(f"duplicate component indices {ks}")
    for k in ks:
        if not 0 <= k < K:
            raise DomainError(f"component index {k} outside 0..{K - 1}")
    weights = [alpha / K if k in ks else 1.0 / K for k in range(K)]
    uncond = len(ks) * (1.0 - alpha) / K
    return CompositeScore(tuple(weights), bundle.latents, uncond, protocol=protocol,
                          alpha=float(alpha), meta={"diluted": ks})


def dilute_single(bundle: LatentBundle, k: int, alpha: float) -> CompositeScore:
    return dilute(bundle, [k], alpha, protocol="dilute-single")


def dilute_pair(bundle: LatentBundle, ks, alpha: float) -> CompositeScore:
    ks = list(ks)
    if len(ks) != 2:
        raise DomainError(f"dilute_pair takes two indices, got {ks}")
    if ks[0] == ks[1]:
        raise DomainError(f"duplicate component indices {ks}")
    return dilute(bundle, ks, alpha, protocol="dilute-pair")


def tune_weights(bundle: LatentBundle, w) -> CompositeScore:
    """Per-component weights ``w_k / K`` with no unconditional term."""
    bundle = _check_bundle(bundle)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if len(w) != bundle.K:
        raise DomainError(f"expected {bundle.K} weights, got {len(w)}")
    if not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite")
    return CompositeScore(tuple(w / bundle.K), bundle.latents, 0.0, protocol="tune",
                          meta={"grid_row": w.tolist()})


def single_component(bundle: LatentBundle, k: int, scaled: bool = False) -> CompositeScore:
    """Generate from component ``k`` alone: weight 1, or ``1/K`` if ``scaled``."""
    bundle = _check_bundle(bundle)
    if not 0 <= k < bundle.K:
        raise DomainError(f"component index {k} outside 0..{bundle.K - 1}")
    w = np.zeros(bundle.K)
    w[k] = 1.0 / bundle.K if scaled else 1.0
    return CompositeScore(tuple(w), bundle.latents, 0.0, protocol="component",
                          meta={"component": k, "scaled": scaled})


def evaluate(recipe: CompositeScore, score_fn, x, t) -> np.ndarray:
    """``sum_k w_k score_fn(x, t, zeta_k) + w_u score_fn(x, t, ones)``.

    Zero-weight terms are skipped; summation order is the term order.
    """
    total = None
    terms = list(zip(recipe.weights, recipe.latents))
    if recipe.uncond_weight != 0.0:
        terms.append((recipe.uncond_weight, unconditional_latent(recipe.d_z)))
    for w, z in terms:
        if w == 0.0:
            continue
        s = w * np.asarray(score_fn(x, t, z))
        total = s if total is None else total + s
    if total is None:
        total = np.zeros_like(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(total)):
        raise NumericError(f"non-finite composite score at t={t}")
    return total


def as_score_fn(recipe: CompositeScore, score_fn):
    """Bind a recipe into a ``(x, t) -> score`` field for the sampler."""
    return lambda x, t: evaluate(recipe, score_fn, x, t)


def combine(a: CompositeScore, b: CompositeScore) -> CompositeScore:
    """Disjoint union of two recipes' terms with summed unconditional weight."""
    return CompositeScore(
        a.weights + b.weights,
        np.concatenate([a.latents, b.latents]),
        a.uncond_weight + b.uncond_weight,
    )

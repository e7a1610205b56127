"""Score-based generative modelling with a K-component latent decomposition.

The score of a datum is modelled as the average of K latent-conditioned
scores; recombining those components (reweighting, diluting toward the
unconditional score) steers generation.
"""
from .compose import (
    CompositeScore,
    decomposition_recipe,
    dilute_pair,
    dilute_single,
    evaluate,
    single_component,
    tune_weights,
)
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    IntegrityError,
    NumericError,
    ScoreCompError,
    ShapeMismatchError,
)
from .likelihood import ElboEstimate, divergence, elbo, model_elbo
from .network import LatentBundle, NetConfig, ScoreNet
from .sde import DiffusionSchedule, perturb, reverse_sample
from .targets import Dataset, GaussianMixtureTarget, analytic_logpdf, analytic_score, load_dataset
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Checkpoint",
    "CompositeScore",
    "ConfigError",
    "DataError",
    "Dataset",
    "DiffusionSchedule",
    "DomainError",
    "ElboEstimate",
    "GaussianMixtureTarget",
    "IntegrityError",
    "LatentBundle",
    "NetConfig",
    "NumericError",
    "ScoreCompError",
    "ScoreNet",
    "ShapeMismatchError",
    "TrainConfig",
    "analytic_logpdf",
    "analytic_score",
    "decomposition_recipe",
    "dilute_pair",
    "dilute_single",
    "divergence",
    "elbo",
    "evaluate",
    "load_checkpoint",
    "load_dataset",
    "model_elbo",
    "perturb",
    "reverse_sample",
    "save_checkpoint",
    "single_component",
    "train",
    "tune_weights",
]

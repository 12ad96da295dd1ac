"""Attribute debiasing for a small conditional diffusion model.

Rank-1 adapters per attribute category are trained by self-discovery
against the frozen base model, then switched in per sample by one-hot
indicators drawn from a target distribution.
"""
from .adapters import AdapterBank, AttributeAdapter, PatchedModelView, patch_weights
from .config import RunConfig, default_config, load_config
from .diffusion import make_schedule, sample
from .inference import DistributionSpec, generate_batch, uniform_pmf
from .metrics import energy_distance, fd_score, fidelity_score
from .nn import DenoiserModel, ModelSpec
from .train import PretrainConfig, TrainConfig, pretrain_base, train_attribute
from .world import WorldSpec, make_world

__version__ = "0.1.0"

__all__ = [
    "AdapterBank", "AttributeAdapter", "PatchedModelView", "patch_weights",
    "RunConfig", "default_config", "load_config", "make_schedule", "sample",
    "DistributionSpec", "generate_batch", "uniform_pmf", "energy_distance", "fd_score",
    "fidelity_score", "DenoiserModel", "ModelSpec", "PretrainConfig", "TrainConfig",
    "pretrain_base", "train_attribute", "WorldSpec", "make_world",
]

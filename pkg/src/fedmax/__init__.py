"""Deterministic federated-learning simulator with activation regularizers."""

from .numerics import ContractError, Rng
from .objectives import ConfigError, LocalObjective
from .model import MlpModel, backward, forward, sgd_step
from .datagen import DeviceShard, LabeledDataset, SyntheticSpec, generate_synthetic
from .federation import FederationConfig, RoundRecord, aggregate, run_federation

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DeviceShard", "FederationConfig", "LabeledDataset",
    "LocalObjective", "MlpModel", "Rng", "RoundRecord", "SyntheticSpec", "aggregate",
    "backward", "forward", "generate_synthetic", "run_federation", "sgd_step",
]

"""Fairness-aware federated learning with selective model updates."""

from .config import ExperimentConfig, load_config
from .data import ClientDataset, DatasetSchema, PartitionSpec, Records, build_clients, dirichlet_partition
from .errors import ConfigError, DimensionError, EquiFLError, InputError, NumericError, SchemaError
from .fairness import delta_dp, delta_eo, soft_dp_penalty
from .fedsim import FedConfig, aggregate, run_experiment, selective_init
from .nn import ModelParams, NetConfig, init_params, loss_and_grad
from .report import MetricsReport

__all__ = [
    "ClientDataset", "ConfigError", "DatasetSchema", "DimensionError", "EquiFLError", "ExperimentConfig",
    "FedConfig", "InputError", "MetricsReport", "ModelParams", "NetConfig", "NumericError", "PartitionSpec",
    "Records", "SchemaError", "aggregate", "build_clients", "delta_dp", "delta_eo", "dirichlet_partition",
    "init_params", "load_config", "loss_and_grad", "run_experiment", "selective_init", "soft_dp_penalty",
]

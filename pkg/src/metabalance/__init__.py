"""Auxiliary-task gradient magnitude balancing for multi-task recommenders."""

from .balancer import BalancerConfig, MetaBalance, Strategy, balance_step, compute_weight, update_ema
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, ContractViolation, DataError, MetaBalanceError, TrainingFault

__all__ = [
    "BalancerConfig", "MetaBalance", "Strategy", "balance_step", "compute_weight", "update_ema",
    "ExperimentConfig", "load_config",
    "ConfigurationError", "ContractViolation", "DataError", "MetaBalanceError", "TrainingFault",
]
__version__ = "0.1.0"

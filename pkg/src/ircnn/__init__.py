"""Inception-recurrent CNN micro-framework."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, InitializationError, IrcnnError, NumericsError
from .graph import LayerGraph
from .models import (
    IrcnnBlockConfig,
    ModelConfig,
    TransactionBlockConfig,
    build_ircnn_block,
    build_model,
    build_transaction_block,
    count_params,
    make_preset,
)
from .train import RunConfig, evaluate, run_training

__all__ = [
    "ConfigError",
    "DataError",
    "InitializationError",
    "IrcnnError",
    "IrcnnBlockConfig",
    "LayerGraph",
    "ModelConfig",
    "NumericsError",
    "RunConfig",
    "TransactionBlockConfig",
    "build_ircnn_block",
    "build_model",
    "build_transaction_block",
    "count_params",
    "evaluate",
    "make_preset",
    "run_training",
    "__version__",
]

"""jetforge: a small numpy JetFormer with pruning, 1-bit quantization and HPO."""

from .cost import DEFAULT, COMPACT, CostReport, count_flops, count_params, cost_report
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    JetForgeError,
    NonFiniteError,
    ParseError,
    PruningError,
    TrainingDiverged,
)
from .model import ModelConfig, ModelState, build, forward, predict_proba
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DEFAULT",
    "COMPACT",
    "ConfigError",
    "ContractError",
    "CostReport",
    "DimensionError",
    "JetForgeError",
    "ModelConfig",
    "ModelState",
    "NonFiniteError",
    "ParseError",
    "PruningError",
    "Tensor",
    "TrainingDiverged",
    "build",
    "cost_report",
    "count_flops",
    "count_params",
    "forward",
    "no_grad",
    "predict_proba",
]

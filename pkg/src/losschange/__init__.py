"""Per-parameter, per-iteration loss change allocation (LCA) for small feed-forward classifiers."""
from .config import RunConfig, load_config
from .exceptions import (ConfigError, ContractError, DataFormatError, IntegrityError, LcaGateError,
                         NumericError)
from .lca import ClassLcaTensor, LcaMatrix, compute_lca, compute_lca_per_class, read_lca, write_lca
from .nn import Dataset, LayerLayout, MLPObjective, init_params
from .optim import OptimConfig, momentum_from_delay
from .trajectory import Trajectory, load as load_trajectory, record

__version__ = "0.1.0"

__all__ = [
    "ClassLcaTensor", "ConfigError", "ContractError", "DataFormatError", "Dataset",
    "IntegrityError", "LayerLayout", "LcaGateError", "LcaMatrix", "MLPObjective", "NumericError",
    "OptimConfig", "RunConfig", "Trajectory", "compute_lca", "compute_lca_per_class",
    "init_params", "load_config", "load_trajectory", "momentum_from_delay", "read_lca",
    "record", "write_lca",
]

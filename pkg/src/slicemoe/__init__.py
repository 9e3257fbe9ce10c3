"""SliceMoE: sub-token slice routing to sparse experts, built on a small deterministic numpy substrate."""

from .config import SliceMoEConfig, SyntheticSpec, TrainConfig
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    EquivalenceError,
    IntegrityError,
    NumericError,
    ParameterError,
    SchemaError,
    SliceMoEError,
)
from .model import SliceMoEClassifier, SliceMoELayer

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "EquivalenceError",
    "IntegrityError",
    "NumericError",
    "ParameterError",
    "SchemaError",
    "SliceMoEClassifier",
    "SliceMoEConfig",
    "SliceMoELayer",
    "SliceMoEError",
    "SyntheticSpec",
    "TrainConfig",
    "__version__",
]

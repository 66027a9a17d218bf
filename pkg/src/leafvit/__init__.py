"""MobileViTV2_050 leaf-disease classifier engine on a numpy autodiff core."""
from .errors import (
    ArchiveError,
    ConfigError,
    ContractError,
    DecodeError,
    DimensionError,
    IngestionError,
    LabelError,
    LeafVitError,
    NumericError,
    StatisticsError,
)
from .model import (
    build_baseline_cnn,
    build_mobilevitv2_050,
    count_macs,
    count_params,
    estimate_model_size_bytes,
    predict,
)
from .tensor import Tensor, make_rng, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "ConfigError",
    "ContractError",
    "DecodeError",
    "DimensionError",
    "IngestionError",
    "LabelError",
    "LeafVitError",
    "NumericError",
    "StatisticsError",
    "Tensor",
    "build_baseline_cnn",
    "build_mobilevitv2_050",
    "count_macs",
    "count_params",
    "estimate_model_size_bytes",
    "make_rng",
    "no_grad",
    "precision",
    "predict",
]

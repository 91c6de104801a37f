"""Small-area gender pay gap decomposition with weighted mixed models."""

__version__ = "0.1.0"

from .data import Dataset, UnitRecord, Variable, VariableSchema, load_dataset
from .decompose import DecomposeResult, decompose_gpg, ob_decompose
from .design import DesignMatrices, ModelSpec, encode_design, load_model_specs
from .errors import (
    ConfigError,
    DataError,
    DesignError,
    FitError,
    PaygapError,
    SchemaError,
    SparseDataError,
)
from .lmm import FittedLMM, VarianceComponents, fit_reml, restricted_loglik
from .selection import SelectionResult, select_model
from .simulate import GeneratorConfig, compute_truth, generate, run_experiment

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "DecomposeResult",
    "DesignError",
    "DesignMatrices",
    "FitError",
    "FittedLMM",
    "GeneratorConfig",
    "ModelSpec",
    "PaygapError",
    "SchemaError",
    "SelectionResult",
    "SparseDataError",
    "UnitRecord",
    "Variable",
    "VariableSchema",
    "VarianceComponents",
    "compute_truth",
    "decompose_gpg",
    "encode_design",
    "fit_reml",
    "generate",
    "load_dataset",
    "load_model_specs",
    "ob_decompose",
    "restricted_loglik",
    "run_experiment",
    "select_model",
]

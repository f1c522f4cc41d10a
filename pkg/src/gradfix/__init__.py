"""Gradient-sign masked task-vector transport between misaligned models."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CongruenceError,
    ConfigError,
    DeficientClassError,
    DivergenceError,
    GradFixError,
    NumericError,
    StageError,
)
from .param_space import MaskVector, ParamVector, SignVector, TaskVector  # noqa: E402
from .datasets import LabeledDataset, FeatureSet, WorldConfig, make_world  # noqa: E402
from .model import ModelSpec, TrainConfig, evaluate, init_params, train  # noqa: E402
from .signs import SignEstimate, estimate_signs  # noqa: E402
from .transport import TransportConfig, build_delta, build_mask, transport  # noqa: E402
from .config import ExperimentConfig, load_config  # noqa: E402
from .harness import run_pipeline, sweep_alpha  # noqa: E402
from .estimators import GradFixTransporter, SubsetSelector  # noqa: E402

__all__ = [
    "__version__",
    "CongruenceError",
    "ConfigError",
    "DeficientClassError",
    "DivergenceError",
    "GradFixError",
    "NumericError",
    "StageError",
    "ParamVector",
    "TaskVector",
    "SignVector",
    "MaskVector",
    "LabeledDataset",
    "FeatureSet",
    "WorldConfig",
    "make_world",
    "ModelSpec",
    "TrainConfig",
    "init_params",
    "train",
    "evaluate",
    "SignEstimate",
    "estimate_signs",
    "TransportConfig",
    "build_mask",
    "build_delta",
    "transport",
    "ExperimentConfig",
    "load_config",
    "run_pipeline",
    "sweep_alpha",
    "GradFixTransporter",
    "SubsetSelector",
]

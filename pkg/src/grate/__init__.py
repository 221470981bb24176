"""Rank-constrained tensor factorization for knowledge tracing with adaptive attempt aggregation."""

__version__ = "0.1.0"

from .config import PRESETS, SgdConfig, TrainConfig
from .data import DataError, Dataset, SyntheticSpec, generate, load, save, synthetic_spec
from .evaluation import EvalReport, ablation_suite, cross_validate, grid_search, stratified_folds
from .metrics import UndefinedMetricError, auc, rmse
from .model import ModelParams, init_params, knowledge, predict, predict_many
from .optimizer import NumericalError, fit, project
from .tensor import AggregationMap, SparseTensor, apply_aggregation, confidence_weights, merge_slices
from .trainer import OnlineState, run_online, step

__all__ = [
    "AggregationMap", "DataError", "Dataset", "EvalReport", "ModelParams", "NumericalError", "OnlineState",
    "PRESETS", "SgdConfig", "SparseTensor", "SyntheticSpec", "TrainConfig", "UndefinedMetricError",
    "ablation_suite", "apply_aggregation", "auc", "confidence_weights", "cross_validate", "fit", "generate",
    "grid_search", "init_params", "knowledge", "load", "merge_slices", "predict", "predict_many", "project",
    "rmse", "run_online", "save", "step", "stratified_folds", "synthetic_spec",
]

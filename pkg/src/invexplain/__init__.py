"""Invertible-network classifiers and exact decision-boundary explanations."""
from .datasets import Dataset, load_idx, split, synthetic_informative, two_moons
from .estimator import InvertibleNetClassifier
from .explain import (
    boundary_between,
    boundary_trace_2d,
    explain_decision,
    feature_importance,
    interpolate_path,
    project_to_boundary,
    taylor_residual_check,
)
from .network import InvertibleNet, NetworkSpec, build_network, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "InvertibleNet", "InvertibleNetClassifier", "NetworkSpec", "TrainConfig",
    "boundary_between", "boundary_trace_2d", "build_network", "explain_decision", "feature_importance",
    "interpolate_path", "load_checkpoint", "load_idx", "project_to_boundary", "save_checkpoint", "split",
    "synthetic_informative", "taylor_residual_check", "train", "two_moons",
]

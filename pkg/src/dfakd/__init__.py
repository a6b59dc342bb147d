"""Differentiable feature aggregation for knowledge distillation, on a small numpy autodiff engine."""

from . import tensor
from .losses import AggregationWeights, LossWeights
from .networks import GroupedNetwork, GroupSpec
from .search import SearchSchedule, TrainSchedule, baseline_weights, init_arch, run_distill, run_search

__version__ = "0.1.0"

__all__ = [
    "AggregationWeights",
    "GroupSpec",
    "GroupedNetwork",
    "LossWeights",
    "SearchSchedule",
    "TrainSchedule",
    "baseline_weights",
    "init_arch",
    "run_distill",
    "run_search",
    "tensor",
]

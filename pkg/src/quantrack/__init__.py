"""Monotone multi-quantile tracking for drifting data streams."""

from .estimators import (
    EstimatorConfig,
    QuantileBank,
    QuantileTargets,
    Transform,
    Variant,
    apply_transform,
    dumiqe_additive_step,
    dumiqe_step,
    h_boundary,
    h_interior,
    invert_transform,
    mdumiqe_step,
)
from .evaluation import EvalReport, SweepGrid, run_experiment, static_convergence, sweep, violation_rate_check
from .oracle import WindowOracle
from .streams import StreamConfig, SyntheticStream, build_targets, replay_open, true_quantiles

__version__ = "0.1.0"

__all__ = [
    "EstimatorConfig",
    "EvalReport",
    "QuantileBank",
    "QuantileTargets",
    "StreamConfig",
    "SweepGrid",
    "SyntheticStream",
    "Transform",
    "Variant",
    "WindowOracle",
    "apply_transform",
    "build_targets",
    "dumiqe_additive_step",
    "dumiqe_step",
    "h_boundary",
    "h_interior",
    "invert_transform",
    "mdumiqe_step",
    "replay_open",
    "run_experiment",
    "static_convergence",
    "sweep",
    "true_quantiles",
    "violation_rate_check",
]

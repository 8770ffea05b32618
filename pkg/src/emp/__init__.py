"""Efficient motion prediction: encoders, decoders, training and metrics."""

from emp.metrics import EvalReport, brier_min_fde, evaluate, min_ade, min_fde, miss_rate
from emp.model import (
    EmpModel,
    ModelConfig,
    MultiModalPrediction,
    ParameterStore,
    emp_d_config,
    emp_m_config,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from emp.scenario import (
    AgentTrack,
    LaneSegment,
    PreprocessedScene,
    Scenario,
    SyntheticSpec,
    generate_synthetic,
    load_scenarios,
    preprocess,
    resample_polyline,
    save_scenarios,
    velocity_magnitude,
)
from emp.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AgentTrack",
    "EmpModel",
    "EvalReport",
    "LaneSegment",
    "ModelConfig",
    "MultiModalPrediction",
    "ParameterStore",
    "PreprocessedScene",
    "Scenario",
    "SyntheticSpec",
    "TrainConfig",
    "brier_min_fde",
    "emp_d_config",
    "emp_m_config",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_scenarios",
    "min_ade",
    "min_fde",
    "miss_rate",
    "param_count",
    "preprocess",
    "resample_polyline",
    "save_checkpoint",
    "save_scenarios",
    "train",
    "velocity_magnitude",
]

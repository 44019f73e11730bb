"""LLM-guided tuning of physical-design flow parameters."""

from .kernels import BACKEND
from .metrics import Baseline, MetricRecord, Objective, get_baseline, normalized_loss
from .params import ParamSpace, ParamSpec, ParamVector, build_preset_space

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Baseline",
    "MetricRecord",
    "Objective",
    "ParamSpace",
    "ParamSpec",
    "ParamVector",
    "build_preset_space",
    "get_baseline",
    "normalized_loss",
]

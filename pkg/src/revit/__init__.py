"""Resizable vision transformer with adaptive token-length inference."""

from .config import (
    DataConfig,
    DistillConfig,
    ReViTConfig,
    RunConfig,
    TLAPlan,
    TokenSchedule,
    TrainPlan,
    load_run_config,
)
from .model import ParamStore, ReViT, count_flops, flops_terms
from .optim import AdamW
from .tensor import Tensor, backward, parameter

__all__ = [
    "AdamW",
    "DataConfig",
    "DistillConfig",
    "ParamStore",
    "ReViT",
    "ReViTConfig",
    "RunConfig",
    "TLAPlan",
    "Tensor",
    "TokenSchedule",
    "TrainPlan",
    "backward",
    "count_flops",
    "flops_terms",
    "load_run_config",
    "parameter",
]

"""Emulated binary16 transformer inference with per-op-class precision policies."""

from .model import ModelConfig, build_model, flop_count, forward, param_count, preset
from .numerics import Dtype, KernelConfig, round16
from .policy import PrecisionPolicy, resolve_policy

__all__ = [
    "Dtype",
    "KernelConfig",
    "ModelConfig",
    "PrecisionPolicy",
    "build_model",
    "flop_count",
    "forward",
    "param_count",
    "preset",
    "resolve_policy",
    "round16",
]

__version__ = "0.1.0"

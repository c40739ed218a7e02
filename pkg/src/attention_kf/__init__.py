"""Attention Kalman filter: learned-gain filtering with lattice-PWL batch pre-training."""

from .system import PARA_M, PARA_S, X0, SystemModel, SynthParams, synthetic_model
from .nn import AttentionNetParams, init_params
from .atkf import atkf_run

__all__ = [
    "PARA_M",
    "PARA_S",
    "X0",
    "SystemModel",
    "SynthParams",
    "synthetic_model",
    "AttentionNetParams",
    "init_params",
    "atkf_run",
]

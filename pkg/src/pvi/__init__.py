"""Particle variational inference for semi-implicit distributions."""

from .flow import DivergenceError, FlowState, MetricsTrace, PviConfig, pvi_init, pvi_step, run
from .kernels import Constant, LSkip, LSkipFullCov, LSkipHetero, Push, Skip
from .numerics import Rng
from .sid import SidModel, sid_log_density, sid_sample, sid_score

__all__ = [
    "Constant",
    "DivergenceError",
    "FlowState",
    "LSkip",
    "LSkipFullCov",
    "LSkipHetero",
    "MetricsTrace",
    "Push",
    "PviConfig",
    "Rng",
    "SidModel",
    "Skip",
    "pvi_init",
    "pvi_step",
    "run",
    "sid_log_density",
    "sid_sample",
    "sid_score",
]

"""Interacting particle simulation for mean-field SDEs.

Explicit and backward Euler-Maruyama schemes, stability-rate equations, a
propagation-of-chaos harness and a sampled assumption checker.
"""

from .measure import LawView, MeasureView, ParticleCloud
from .model import ModelSpec, RateConstants, get_preset
from .scheme import ImplicitSolveFailure, SchemeConfig, StepRecord, simulate, simulate_coupled

__all__ = [
    "LawView",
    "MeasureView",
    "ParticleCloud",
    "ModelSpec",
    "RateConstants",
    "get_preset",
    "ImplicitSolveFailure",
    "SchemeConfig",
    "StepRecord",
    "simulate",
    "simulate_coupled",
]

__version__ = "0.1.0"

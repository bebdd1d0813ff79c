"""Desk-scale joint conditional flow matching for spectral signal enhancement.

The package covers compressed complex STFT features, noise-scale calibration,
probability paths and their exact fields, fixed-step ODE solvers, a small
dense flow network with manual backprop, toy geometric experiments, and
objective metrics. ``flowpost.cli`` ties them together.
"""

from .calibration import SigmaProfile, sigma_from_heuristic
from .features import ComplexFeatureGrid, FeatureConfig, Waveform, extract, invert
from .flowmath import PathKind, PathSpec, conditional_field, marginal_field_oracle
from .neural import FlowModel, TrainConfig, enhance, enhance_grid, init_model, train
from .odesolve import Method, SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "ComplexFeatureGrid",
    "FeatureConfig",
    "FlowModel",
    "Method",
    "PathKind",
    "PathSpec",
    "SigmaProfile",
    "SolverConfig",
    "TrainConfig",
    "Waveform",
    "conditional_field",
    "enhance",
    "enhance_grid",
    "extract",
    "init_model",
    "invert",
    "marginal_field_oracle",
    "sigma_from_heuristic",
    "solve",
    "train",
    "__version__",
]

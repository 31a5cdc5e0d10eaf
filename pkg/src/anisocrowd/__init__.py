"""Anisotropic interaction crowd model: simulation, adjoint calibration and density analysis."""

__version__ = "0.1.0"

from .adjoint import (
    CalibrationConfig,
    CalibrationResult,
    MiniBatch,
    calibrate,
    cost_functional,
    descent_step,
    discrete_gradient,
    minibatch_gradient,
    reduced_gradient,
    solve_adjoint,
)
from .density import DegenerateInputError, bounded_voronoi, fundamental_diagram
from .estimators import CrowdModelCalibrator, VoronoiDensity
from .model import AdmissibleBox, ControlVector, ModelParams, interaction_force, rotation_angle
from .simulator import GroupSpec, Rect, Scenario, Trajectory, integrate, simulate

__all__ = [
    "AdmissibleBox",
    "CalibrationConfig",
    "CalibrationResult",
    "ControlVector",
    "CrowdModelCalibrator",
    "DegenerateInputError",
    "GroupSpec",
    "MiniBatch",
    "ModelParams",
    "Rect",
    "Scenario",
    "Trajectory",
    "VoronoiDensity",
    "bounded_voronoi",
    "calibrate",
    "cost_functional",
    "descent_step",
    "discrete_gradient",
    "fundamental_diagram",
    "integrate",
    "interaction_force",
    "minibatch_gradient",
    "reduced_gradient",
    "rotation_angle",
    "simulate",
    "solve_adjoint",
]

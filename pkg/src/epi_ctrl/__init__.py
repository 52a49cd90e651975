"""Optimal suppression and vaccination control for an SEIR epidemic."""

from .cost import CostBreakdown, CostParams, evaluate_cost
from .errors import EpiCtrlError
from .pmp import OptimizationResult, SolverConfig, forward_backward_sweep
from .seir import ControlSchedule, EpidemicState, ModelParams, Trajectory, integrate

__version__ = "0.1.0"

__all__ = [
    "ControlSchedule", "CostBreakdown", "CostParams", "EpiCtrlError", "EpidemicState",
    "ModelParams", "OptimizationResult", "SolverConfig", "Trajectory", "evaluate_cost",
    "forward_backward_sweep", "integrate",
]

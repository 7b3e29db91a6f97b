"""Density-driven flow solver: discretization, multigrid and time marching."""
from .assembly import Discretization, build_discretization
from .flow import (
    SolverConfig, SolverFailure, State, RunMetrics, Trajectory, darcy_velocity,
    linear_solve, time_march, vertex_velocity, mass_balance_residual,
)
from .multigrid import MultigridPreconditioner

__all__ = [
    "Discretization", "build_discretization", "SolverConfig", "SolverFailure", "State",
    "RunMetrics", "Trajectory", "darcy_velocity", "linear_solve", "time_march",
    "vertex_velocity", "mass_balance_residual", "MultigridPreconditioner",
]

"""Flat-output NMPC with adaptive time-mesh refinement for a multirotor rigid body.

The controller optimizes flat-output nodes (position, yaw and their
derivatives) with a Levenberg-Marquardt least-squares solver, refines the
time mesh near the start of the horizon where the discretization error is
large, and runs in closed loop against a simulated rigid body.
"""

from __future__ import annotations

from flatnmpc._kernels import BACKEND
from flatnmpc.errors import (
    ConfigError,
    DimensionMismatch,
    DivergenceError,
    FactorizationFailure,
    FlatNmpcError,
    RefinementBudgetExceeded,
    SingularFlatState,
    SolveFailure,
)
from flatnmpc.flat_model import (
    ControlInput,
    FlatState,
    RigidBodyState,
    VehicleParams,
    flat_from_state,
    recover,
    recover_input,
    recover_state,
)
from flatnmpc.harness import ExperimentConfig, load_config, run_lemniscate, run_regulation_suite, run_runtime_sweep
from flatnmpc.ls_solver import LsConfig, optimize
from flatnmpc.mesh_refine import RefineConfig, discretization_error, hermite_interpolate, refine
from flatnmpc.nmpc_runtime import (
    NmpcConfig,
    NmpcController,
    RegulationTask,
    TrackingTask,
    compute_metrics,
    lemniscate,
    nmpc_cycle,
    run_closed_loop,
)
from flatnmpc.ocp import FlatTrajectory, OcpLeastSquares, OcpProblem, OcpWeights, TimeMesh, initial_guess
from flatnmpc.rigid_body import step_coarse, step_fine

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "ControlInput",
    "DimensionMismatch",
    "DivergenceError",
    "ExperimentConfig",
    "FactorizationFailure",
    "FlatNmpcError",
    "FlatState",
    "FlatTrajectory",
    "LsConfig",
    "NmpcConfig",
    "NmpcController",
    "OcpLeastSquares",
    "OcpProblem",
    "OcpWeights",
    "RefineConfig",
    "RefinementBudgetExceeded",
    "RegulationTask",
    "RigidBodyState",
    "SingularFlatState",
    "SolveFailure",
    "TimeMesh",
    "TrackingTask",
    "VehicleParams",
    "compute_metrics",
    "discretization_error",
    "flat_from_state",
    "hermite_interpolate",
    "initial_guess",
    "lemniscate",
    "load_config",
    "nmpc_cycle",
    "optimize",
    "recover",
    "recover_input",
    "recover_state",
    "refine",
    "run_closed_loop",
    "run_lemniscate",
    "run_regulation_suite",
    "run_runtime_sweep",
    "step_coarse",
    "step_fine",
]

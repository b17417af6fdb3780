"""Rigid-body dynamics and the discrete step rules built on them.

Both step rules are fixed-step RK4 with the input held constant over the
step; they differ only in the number of substeps. The rotation is projected
back onto SO(3) after every substep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from flatnmpc._kernels import backend
from flatnmpc.flat_model import ControlInput, RigidBodyState, VehicleParams

N_FINE = 10


class StateDerivative(NamedTuple):
    p_dot: NDArray
    v_dot: NDArray
    R_dot: NDArray
    omega_dot: NDArray


@dataclass(frozen=True)
class StepRule:
    """``coarse`` is one RK4 step per interval, ``fine`` uses ``substeps``."""

    scheme: str = "coarse"
    substeps: int = N_FINE

    def __post_init__(self):
        if self.scheme not in ("coarse", "fine"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "fine" and self.substeps < 2:
            raise ValueError("fine scheme needs at least 2 substeps")

    @property
    def n_substeps(self) -> int:
        return 1 if self.scheme == "coarse" else self.substeps

    def __call__(self, x, u, dt, params):
        return integrate(x, u, dt, params, self.n_substeps)


def continuous_dynamics(x: RigidBodyState, u: ControlInput, params: VehicleParams) -> StateDerivative:
    d = backend.dynamics(x.to_array()[None], u.to_array()[None], params.vector)[0]
    return StateDerivative(d[0:3], d[3:6], d[6:15].reshape(3, 3), d[15:18])


def integrate(x: RigidBodyState, u: ControlInput, dt: float, params: VehicleParams, substeps: int) -> RigidBodyState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = backend.step(x.to_array()[None], u.to_array()[None], dt, int(substeps), params.vector)
    return RigidBodyState.from_array(out[0])


def step_coarse(x: RigidBodyState, u: ControlInput, dt: float, params: VehicleParams) -> RigidBodyState:
    """One RK4 step: the discrete dynamics used inside the optimal control problem."""
    return integrate(x, u, dt, params, 1)


def step_fine(
    x: RigidBodyState, u: ControlInput, dt: float, params: VehicleParams, n_fine: int = N_FINE
) -> RigidBodyState:
    """``n_fine`` RK4 substeps over ``dt``; also drives the simulated plant."""
    return integrate(x, u, dt, params, n_fine)

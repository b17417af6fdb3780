"""Flat outputs of a quadrotor and the maps to and from its rigid-body state.

The flat output is position plus yaw. A node stores position derivatives up
to snap and yaw derivatives up to second order, which is exactly what the
recovery of thrust and body torque needs.

Conventions: gravity acts along ``-e_z`` with magnitude ``g``; the thrust
acts along the body z axis (third column of ``R``); ``omega`` is expressed in
the body frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from flatnmpc import layout
from flatnmpc._kernels import backend
from flatnmpc.errors import SingularFlatState

EPS_THRUST = 1e-6
EPS_HEADING = 1e-6
SO3_TOL = 1e-9


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``; angles already in range are returned unchanged."""
    a = np.asarray(a, dtype=float)
    w = np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))
    return float(w) if np.ndim(w) == 0 else w


def hat(w) -> NDArray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rot_z(angle: float) -> NDArray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_log(R) -> NDArray:
    return backend.so3_log(np.asarray(R, dtype=float).reshape(1, 3, 3))[0]


def euler_zyx(R) -> tuple[float, float, float]:
    """Roll, pitch, yaw of ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    R = np.asarray(R)
    pitch = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    return roll, pitch, yaw


@dataclass
class VehicleParams:
    mass: float
    inertia: NDArray
    gravity: float = 9.81
    eps_thrust: float = EPS_THRUST

    def __post_init__(self):
        self.inertia = np.array(self.inertia, dtype=float).reshape(3, 3)
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.gravity > 0:
            raise ValueError("gravity must be positive")
        if not np.allclose(self.inertia, self.inertia.T):
            raise ValueError("inertia must be symmetric")
        if np.linalg.eigvalsh(self.inertia).min() <= 0:
            raise ValueError("inertia must be positive definite")

    @classmethod
    def firefly(cls) -> VehicleParams:
        """Hexarotor of the size used in the regulation experiments."""
        return cls(mass=1.55, inertia=np.diag([0.0347563, 0.0458929, 0.0977]))

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity

    @cached_property
    def inertia_inv(self) -> NDArray:
        return np.linalg.inv(self.inertia)

    @cached_property
    def vector(self) -> NDArray:
        """Packed parameter vector consumed by the kernels."""
        return np.concatenate(
            [
                [self.mass, self.gravity, self.eps_thrust, EPS_HEADING],
                self.inertia.ravel(),
                self.inertia_inv.ravel(),
            ]
        )


@dataclass
class FlatState:
    """Flat output and its derivatives at one mesh node."""

    p: NDArray
    gamma: float = 0.0
    d1: NDArray = field(default_factory=lambda: np.zeros(3))
    d2: NDArray = field(default_factory=lambda: np.zeros(3))
    d3: NDArray = field(default_factory=lambda: np.zeros(3))
    d4: NDArray = field(default_factory=lambda: np.zeros(3))
    dgamma1: float = 0.0
    dgamma2: float = 0.0

    def __post_init__(self):
        for name in ("p", "d1", "d2", "d3", "d4"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).reshape(3))
        self.gamma = wrap_angle(self.gamma)
        self.dgamma1 = float(self.dgamma1)
        self.dgamma2 = float(self.dgamma2)
        if not np.all(np.isfinite(self.to_array())):
            raise ValueError("flat state has non-finite entries")

    def to_array(self) -> NDArray:
        out = np.empty(layout.FLAT_DIM)
        out[layout.P] = self.p
        out[layout.YAW] = self.gamma
        out[layout.VEL] = self.d1
        out[layout.ACC] = self.d2
        out[layout.JERK] = self.d3
        out[layout.SNAP] = self.d4
        out[layout.DYAW] = self.dgamma1
        out[layout.DDYAW] = self.dgamma2
        return out

    @classmethod
    def from_array(cls, a) -> FlatState:
        a = np.asarray(a, dtype=float)
        return cls(
            p=a[layout.P], gamma=a[layout.YAW], d1=a[layout.VEL], d2=a[layout.ACC],
            d3=a[layout.JERK], d4=a[layout.SNAP], dgamma1=a[layout.DYAW],
            dgamma2=a[layout.DDYAW],
        )

    @classmethod
    def hover(cls, p, gamma: float = 0.0) -> FlatState:
        return cls(p=p, gamma=gamma)


@dataclass
class RigidBodyState:
    p: NDArray
    v: NDArray
    R: NDArray
    omega: NDArray

    def __post_init__(self):
        self.p = np.array(self.p, dtype=float).reshape(3)
        self.v = np.array(self.v, dtype=float).reshape(3)
        self.R = np.array(self.R, dtype=float).reshape(3, 3)
        self.omega = np.array(self.omega, dtype=float).reshape(3)

    def check_rotation(self, tol: float = SO3_TOL) -> bool:
        return bool(
            np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(self.R) - 1.0) <= tol
        )

    def to_array(self) -> NDArray:
        return np.concatenate([self.p, self.v, self.R.ravel(), self.omega])

    @classmethod
    def from_array(cls, a) -> RigidBodyState:
        a = np.asarray(a, dtype=float)
        return cls(a[layout.S_POS], a[layout.S_VEL], a[layout.S_ROT].reshape(3, 3), a[layout.S_OMEGA])

    @classmethod
    def hover(cls, p, yaw: float = 0.0) -> RigidBodyState:
        return cls(p, np.zeros(3), rot_z(yaw), np.zeros(3))

    @property
    def yaw(self) -> float:
        return euler_zyx(self.R)[2]


@dataclass
class ControlInput:
    thrust: float
    tau: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.thrust = float(self.thrust)
        self.tau = np.array(self.tau, dtype=float).reshape(3)
        if self.thrust < 0:
            raise ValueError("thrust must be non-negative")

    def to_array(self) -> NDArray:
        return np.concatenate([[self.thrust], self.tau])

    @classmethod
    def from_array(cls, a) -> ControlInput:
        return cls(a[0], a[1:4])


def _as_flat_array(fs) -> NDArray:
    return fs.to_array() if isinstance(fs, FlatState) else np.asarray(fs, dtype=float)


def recover(fs, params: VehicleParams) -> tuple[RigidBodyState, ControlInput]:
    """State and input of a flat node."""
    states, inputs, status = backend.recover(_as_flat_array(fs).reshape(1, -1), params.vector)
    if status >= 0:
        raise SingularFlatState("flat state is singular (free fall or undefined heading)")
    return RigidBodyState.from_array(states[0]), ControlInput.from_array(inputs[0])


def recover_state(fs, params: VehicleParams) -> RigidBodyState:
    return recover(fs, params)[0]


def recover_input(fs, params: VehicleParams) -> ControlInput:
    return recover(fs, params)[1]


def flat_from_state(
    x: RigidBodyState,
    u: ControlInput,
    params: VehicleParams,
    dthrust: float = 0.0,
    ddthrust: float = 0.0,
) -> NDArray:
    """Flat node (array layout) of a state, input and thrust derivatives.

    Inverse of :func:`recover`: ``recover(flat_from_state(x, u, ...))``
    returns ``x`` and ``u``. Thrust and its derivatives are the information
    the rigid-body state does not carry.
    """
    return flat_from_state_batch(x, u.to_array()[None], params, dthrust, ddthrust)[0]


def flat_from_state_batch(x: RigidBodyState, inputs, params: VehicleParams, dthrust=0.0, ddthrust=0.0) -> NDArray:
    """:func:`flat_from_state` for one state and a ``(k, 4)`` batch of inputs."""
    out, status = backend.flat_from_state(x.to_array(), inputs, params.vector, float(dthrust), float(ddthrust))
    if status >= 0:
        if abs(x.R[2, 2]) < EPS_HEADING:
            raise SingularFlatState("thrust axis is horizontal")
        raise SingularFlatState("zero thrust has no flat representation")
    return out


def yaw_and_rate(x: RigidBodyState) -> tuple[float, float]:
    """Heading and heading rate of a rigid-body state (no input needed)."""
    R, w = x.R, x.omega
    ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]
    xc = np.sign(ez[2]) * np.array([ey[1], -ey[0], 0.0])
    xc /= np.linalg.norm(xc)
    yc = np.array([-xc[1], xc[0], 0.0])
    dyaw = (w[2] * (ex @ xc) - w[0] * (ez @ xc)) / (ey @ yc)
    return float(np.arctan2(xc[1], xc[0])), float(dyaw)


def state_difference(a: RigidBodyState, b: RigidBodyState) -> NDArray:
    """``a ⊖ b`` as a 12-vector (position, velocity, rotation log, rate)."""
    return backend.state_diff(a.to_array()[None], b.to_array()[None])[0]


def flat_error_terms(fs_k, fs_next, x_goal: RigidBodyState, params: VehicleParams, dt: float):
    """Goal residual, input and continuity residual of one mesh interval.

    Returns ``(nu, phi, gamma)``: ``nu`` is the recovered state at ``fs_k``
    minus the goal, ``phi`` the recovered input, and ``gamma`` the recovered
    state at ``fs_next`` minus one coarse step from ``fs_k``.
    """
    from flatnmpc.rigid_body import step_coarse

    x_k, u_k = recover(fs_k, params)
    x_next = recover_state(fs_next, params)
    nu = state_difference(x_k, x_goal)
    gamma = state_difference(x_next, step_coarse(x_k, u_k, dt, params))
    return nu, u_k.to_array(), gamma

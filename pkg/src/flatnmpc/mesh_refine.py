"""Adaptive time-mesh refinement of the initial horizon segment.

The discretization error of node ``k`` compares the node with a fine
propagation of the recovered state and input of node ``k-1``. Offending
intervals are split at their Hermite midpoint and the head of the trajectory
is re-optimized with the nodes beyond it frozen.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from flatnmpc import layout
from flatnmpc._kernels import backend
from flatnmpc.errors import RefinementBudgetExceeded, SingularFlatState
from flatnmpc.flat_model import VehicleParams, wrap_angle
from flatnmpc.hermite import hermite_array, hermite_interpolate
from flatnmpc.ls_solver import LsConfig, optimize
from flatnmpc.ocp import FlatTrajectory, OcpLeastSquares, OcpProblem
from flatnmpc.rigid_body import N_FINE

__all__ = [
    "ErrorProfile",
    "RefineConfig",
    "RefineStats",
    "discretization_error",
    "hermite_interpolate",
    "refine",
]

# compared flat coordinates per order: position/yaw, then rates, then acceleration
_COMPARED = {
    0: [0, 1, 2, 3],
    1: [0, 1, 2, 3, 4, 5, 6, 16],
    2: [0, 1, 2, 3, 4, 5, 6, 16, 7, 8, 9],
}


@dataclass
class RefineConfig:
    """Refinement settings.

    ``n_add_max=None`` caps insertions at the coarse node count ``N``.
    ``compare_order`` selects the flat coordinates entering the error:
    0 position and yaw, 1 also their rates, 2 also the acceleration.
    """

    err_trs: float = 1e-5
    max_iter: int = 2
    n_i: int = 2
    n_add_max: int | None = None
    compare_order: int = 2
    n_fine: int = N_FINE
    raise_on_budget: bool = False

    def __post_init__(self):
        if not self.err_trs > 0:
            raise ValueError("err_trs must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.n_i < 1:
            raise ValueError("n_i must be at least 1")
        if self.n_add_max is not None and self.n_add_max < 0:
            raise ValueError("n_add_max must be non-negative")
        if self.compare_order not in _COMPARED:
            raise ValueError("compare_order must be 0, 1 or 2")
        if self.n_fine < 2:
            raise ValueError("n_fine must be at least 2")


@dataclass
class ErrorProfile:
    """Squared discretization errors of nodes ``start..start+len-1``.

    The first node of the trajectory has no predecessor and reports 0.
    """

    values: NDArray
    start: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("errors must be finite and non-negative")

    def __len__(self):
        return self.values.size

    def __getitem__(self, k):
        return self.values[k - self.start]

    @property
    def max(self) -> float:
        return float(self.values.max(initial=0.0))

    def offending(self, err_trs: float) -> list[int]:
        """Node indices whose error exceeds the threshold."""
        return [self.start + i for i in np.flatnonzero(self.values > err_trs)]


def discretization_error(
    traj: FlatTrajectory,
    params: VehicleParams,
    segment: tuple[int, int] | None = None,
    compare_order: int = 2,
    n_fine: int = N_FINE,
) -> ErrorProfile:
    """Per-node squared gap between each node and a fine step from its predecessor.

    ``segment`` is an inclusive node range (default: whole trajectory).
    """
    n = len(traj)
    lo, hi = segment if segment is not None else (0, n - 1)
    if not 0 <= lo <= hi < n:
        raise ValueError("segment outside the trajectory")
    first = max(lo, 1)
    eps = np.zeros(hi - lo + 1)
    if first > hi:
        return ErrorProfile(eps, lo)

    Z = traj.nodes
    states, inputs, status = backend.recover(np.ascontiguousarray(Z[first - 1 : hi]), params.vector)
    if status >= 0:
        raise SingularFlatState("singular flat node", node=first - 1 + status)
    dts = traj.mesh.dts[first - 1 : hi]
    prop = backend.step(states, inputs, dts, int(n_fine), params.vector)

    pred = np.zeros((prop.shape[0], layout.FLAT_DIM))
    pred[:, layout.P] = prop[:, layout.S_POS]
    pred[:, layout.VEL] = prop[:, layout.S_VEL]
    R = prop[:, layout.S_ROT].reshape(-1, 3, 3)
    w = prop[:, layout.S_OMEGA]
    ex, ey, ez = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    sgn = np.sign(ez[:, 2])[:, None]
    xc = sgn * np.stack([ey[:, 1], -ey[:, 0], np.zeros(len(ey))], axis=1)
    xc /= np.linalg.norm(xc, axis=1, keepdims=True)
    yc = np.stack([-xc[:, 1], xc[:, 0], np.zeros(len(xc))], axis=1)
    pred[:, layout.YAW] = np.arctan2(xc[:, 1], xc[:, 0])
    pred[:, layout.DYAW] = (
        w[:, 2] * np.einsum("ij,ij->i", ex, xc) - w[:, 0] * np.einsum("ij,ij->i", ez, xc)
    ) / np.einsum("ij,ij->i", ey, yc)
    # the input is held over the step, so the acceleration follows from it
    pred[:, layout.ACC] = inputs[:, :1] * ez / params.mass
    pred[:, layout.ACC.start + 2] -= params.gravity

    idx = _COMPARED[compare_order]
    d = pred[:, idx] - Z[first : hi + 1][:, idx]
    d[:, 3] = wrap_angle(d[:, 3])
    eps[first - lo :] = np.einsum("ij,ij->i", d, d)
    return ErrorProfile(eps, lo)


@dataclass
class RefineStats:
    nodes_added: int = 0
    iterations: int = 0
    initial_max_eps: float = 0.0
    final_max_eps: float = 0.0
    n_tm: int = 0
    budget_exceeded: bool = False
    reverted: bool = False
    solver_iterations: int = 0
    t_jacobian: float = 0.0
    t_solve: float = 0.0
    t_total: float = 0.0
    inserted_times: list = field(default_factory=list)


def _insert_midpoints(traj: FlatTrajectory, nodes: list[int]):
    """Split the interval ending at each node in ``nodes`` at its midpoint."""
    times = traj.mesh.times
    Z = traj.nodes
    new_times, new_nodes = [times[0]], [Z[0]]
    split = set(nodes)
    for k in range(1, len(traj)):
        if k in split:
            dt = times[k] - times[k - 1]
            new_times.append(times[k - 1] + 0.5 * dt)
            new_nodes.append(hermite_array(Z[k - 1], Z[k], dt, 0.5))
        new_times.append(times[k])
        new_nodes.append(Z[k])
    mesh = type(traj.mesh)(np.array(new_times))
    return FlatTrajectory(mesh, np.array(new_nodes))


def refine(
    traj: FlatTrajectory,
    problem: OcpProblem,
    cfg: RefineConfig | None = None,
    solver_cfg: LsConfig | None = None,
) -> tuple[FlatTrajectory, RefineStats]:
    """Refine the first ``cfg.n_i`` intervals of a converged coarse solution.

    Each pass splits every offending interval of the head once (largest
    errors first, at most ``n_i`` per pass and ``n_add_max`` in total),
    re-optimizes the head with the tail frozen, and recomputes the errors.
    A pass that raises the maximum error is discarded and ends refinement.
    """
    cfg = cfg or RefineConfig()
    solver_cfg = solver_cfg or LsConfig()
    t_start = time.perf_counter()
    N = traj.mesh.n_intervals
    n_tm = min(cfg.n_i, N - 1)
    cap = N if cfg.n_add_max is None else cfg.n_add_max
    params = problem.params
    stats = RefineStats(n_tm=n_tm)

    def profile(tr, hi):
        return discretization_error(tr, params, (0, hi), cfg.compare_order, cfg.n_fine)

    eps = profile(traj, n_tm)
    stats.initial_max_eps = stats.final_max_eps = eps.max
    current = traj
    for _ in range(cfg.max_iter):
        offending = eps.offending(cfg.err_trs)
        if not offending:
            break
        budget = cap - stats.nodes_added
        allowed = min(budget, cfg.n_i)
        if len(offending) > budget:
            stats.budget_exceeded = True
            if cfg.raise_on_budget:
                raise RefinementBudgetExceeded(f"insertion cap of {cap} nodes reached")
        if allowed <= 0:
            break
        offending = sorted(sorted(offending, key=lambda k: -eps[k])[:allowed])

        candidate = _insert_midpoints(current, offending)
        hi = n_tm + len(offending)
        sub = dataclasses.replace(problem, mesh=candidate.mesh)
        ls = OcpLeastSquares(sub, candidate, (0, hi), fd_step=solver_cfg.fd_step)
        z, ls_stats = optimize(ls, ls.initial(), solver_cfg)
        stats.iterations += 1
        stats.solver_iterations += ls_stats.iterations
        stats.t_jacobian += ls_stats.t_jacobian
        stats.t_solve += ls_stats.t_solve
        candidate = ls.trajectory(z)

        new_eps = profile(candidate, hi)
        if new_eps.max > eps.max:
            stats.reverted = True
            break
        times = current.mesh.times
        stats.inserted_times.extend(
            0.5 * (times[k - 1] + times[k]) for k in offending
        )
        stats.nodes_added += len(offending)
        current, eps, n_tm = candidate, new_eps, hi
        stats.n_tm = n_tm
        stats.final_max_eps = eps.max

    stats.t_total = time.perf_counter() - t_start
    return current, stats

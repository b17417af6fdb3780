"""Flat-output optimal control problem over a (possibly non-uniform) time mesh.

For every node ``k`` of the active range three residuals are produced: the
distance of the recovered state to the goal (weighted by ``Q``), the
recovered input (weighted by ``R_w``), and the continuity defect between the
recovered state of node ``k+1`` and one coarse dynamics step from node ``k``
over the actual interval length (weighted by ``A_l``). The last node of the
trajectory has no continuity residual.

When the problem carries a measured state ``x0`` the first node is pinned to
it: its only free coordinates are the first control input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numpy.typing import NDArray

from flatnmpc import layout
from flatnmpc._kernels import backend
from flatnmpc.errors import FactorizationFailure, SingularFlatState
from flatnmpc.flat_model import (
    ControlInput,
    FlatState,
    RigidBodyState,
    VehicleParams,
    flat_from_state,
    flat_from_state_batch,
    recover,
    wrap_angle,
)
from flatnmpc.hermite import hermite_array
from flatnmpc.ls_solver import ResidualBlock, boxplus

ROWS = layout.NODE_RES_DIM


@dataclass(frozen=True, eq=False)
class TimeMesh:
    times: NDArray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size < 3:
            raise ValueError("a mesh needs at least two intervals")
        if not np.all(np.diff(t) > 0):
            raise ValueError("mesh times must be strictly increasing")
        if t[0] != 0.0:
            raise ValueError("mesh must start at t = 0")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, t_f: float, n: int) -> TimeMesh:
        return cls(np.arange(n + 1) * (t_f / n))

    @property
    def n_intervals(self) -> int:
        return self.times.size - 1

    @property
    def n_nodes(self) -> int:
        return self.times.size

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    @property
    def dts(self) -> NDArray:
        return np.diff(self.times)

    def insert(self, t: float) -> tuple[TimeMesh, int]:
        """New mesh with ``t`` added, and the index it landed at."""
        k = int(np.searchsorted(self.times, t))
        if k == 0 or k >= self.times.size or self.times[k] == t:
            raise ValueError("inserted time must lie strictly inside an interval")
        return TimeMesh(np.insert(self.times, k, t)), k


@dataclass
class FlatTrajectory:
    mesh: TimeMesh
    nodes: NDArray

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float)
        if self.nodes.shape != (self.mesh.n_nodes, layout.FLAT_DIM):
            raise ValueError("node count must match the mesh")

    def __len__(self):
        return self.mesh.n_nodes

    def node(self, k: int) -> FlatState:
        return FlatState.from_array(self.nodes[k])

    def copy(self) -> FlatTrajectory:
        return FlatTrajectory(self.mesh, self.nodes.copy())

    def sample(self, t: float) -> NDArray:
        """Flat node at time ``t``; the last node is held beyond the horizon."""
        times = self.mesh.times
        if t <= times[0]:
            return self.nodes[0].copy()
        if t >= times[-1]:
            return self.nodes[-1].copy()
        k = int(np.searchsorted(times, t, side="right")) - 1
        dt = times[k + 1] - times[k]
        return hermite_array(self.nodes[k], self.nodes[k + 1], dt, (t - times[k]) / dt)


def _sqrt_factor(W: NDArray) -> NDArray:
    """``L`` with ``L^T L = W`` for a symmetric PSD ``W``."""
    vals, vecs = np.linalg.eigh(0.5 * (W + W.T))
    if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
        raise ValueError("weight matrix is not positive semidefinite")
    return np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T


def _as_weight(w, n: int) -> NDArray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(n)
    if w.ndim == 1:
        return np.diag(w)
    return w


@dataclass
class OcpWeights:
    Q: NDArray
    R_w: NDArray
    A_l: NDArray

    def __post_init__(self):
        self.Q = _as_weight(self.Q, 12)
        self.R_w = _as_weight(self.R_w, 4)
        self.A_l = _as_weight(self.A_l, 12)
        if self.Q.shape != (12, 12) or self.R_w.shape != (4, 4) or self.A_l.shape != (12, 12):
            raise ValueError("weights must be 12x12, 4x4 and 12x12")
        _sqrt_factor(self.Q)
        for name in ("R_w", "A_l"):
            if np.linalg.eigvalsh(getattr(self, name)).min() <= 0:
                raise ValueError(f"{name} must be positive definite")

    @classmethod
    def default(cls) -> OcpWeights:
        """Defaults for the hexarotor; tunable through the experiment config."""
        return cls(
            Q=np.array([10, 10, 10, 1, 1, 1, 5, 5, 5, 0.1, 0.1, 0.1], dtype=float),
            R_w=np.array([0.1, 1, 1, 1], dtype=float),
            A_l=1e6,
        )

    @cached_property
    def whitener(self) -> NDArray:
        """Block-diagonal ``W`` with ``W^T W = diag(Q, R_w, A_l)``."""
        W = np.zeros((ROWS, ROWS))
        W[0:12, 0:12] = _sqrt_factor(self.Q)
        W[12:16, 12:16] = _sqrt_factor(self.R_w)
        W[16:28, 16:28] = _sqrt_factor(self.A_l)
        return W


@dataclass
class OcpProblem:
    """Goal regulation (``goal``) or reference tracking (``reference``).

    ``reference`` maps absolute time to a flat node array; ``t0`` is the
    absolute time of the first mesh node. ``u_ref`` is subtracted from the
    recovered inputs before weighting (zero by default).
    """

    mesh: TimeMesh
    params: VehicleParams
    weights: OcpWeights = field(default_factory=OcpWeights.default)
    goal: RigidBodyState | None = None
    reference: Callable[[float], NDArray] | None = None
    t0: float = 0.0
    x0: RigidBodyState | None = None
    u_ref: NDArray | None = None

    def __post_init__(self):
        if (self.goal is None) == (self.reference is None):
            raise ValueError("set exactly one of goal and reference")

    def reference_nodes(self, times) -> NDArray:
        return np.array([self.reference(self.t0 + t) for t in times])

    def goal_array(self, times) -> NDArray:
        times = np.asarray(times)
        goals = np.zeros((times.size, layout.GOAL_DIM))
        if self.goal is not None:
            goals[:, :18] = self.goal.to_array()
        else:
            states, _, status = backend.recover(self.reference_nodes(times), self.params.vector)
            if status >= 0:
                raise SingularFlatState("reference is singular", node=status)
            goals[:, :18] = states
        if self.u_ref is not None:
            goals[:, 18:] = self.u_ref
        return goals


def transcribe(problem: OcpProblem, traj: FlatTrajectory, active_range=None) -> list[ResidualBlock]:
    """Weighted residual blocks of the nodes in ``active_range`` (inclusive).

    Nodes outside the range enter only as constants.
    """
    n = len(traj)
    lo, hi = active_range if active_range is not None else (0, n - 1)
    if not 0 <= lo <= hi < n:
        raise ValueError("active range outside the mesh")
    raw, status = backend.ocp_residuals(
        traj.nodes, traj.mesh.dts, problem.goal_array(traj.mesh.times), problem.params.vector, lo, hi
    )
    if status >= 0:
        raise SingularFlatState("singular flat node", node=status)
    w = problem.weights
    blocks = []
    for i, k in enumerate(range(lo, hi + 1)):
        blocks.append(ResidualBlock(raw[i, 0:12], w.Q, (k,), "state"))
        blocks.append(ResidualBlock(raw[i, 12:16], w.R_w, (k,), "input"))
        if k < n - 1:
            blocks.append(ResidualBlock(raw[i, 16:28], w.A_l, (k, k + 1), "continuity"))
    return blocks


def total_cost(problem: OcpProblem, traj: FlatTrajectory, active_range=None) -> float:
    return sum(b.cost() for b in transcribe(problem, traj, active_range))


@dataclass
class JacobianBlocks:
    """Jacobian of the whitened residuals in block form.

    ``first`` is the block of the first active node (28 x 4 when pinned),
    ``D[i]`` the block of node ``i`` in its own rows, ``C[i]`` the derivative
    of the continuity rows of node ``i`` with respect to node ``i + 1``.
    """

    first: NDArray
    D: NDArray
    C: NDArray


@lru_cache(maxsize=64)
def _band_pattern(m: int):
    """Flat positions in banded upper storage of the tridiagonal 18x18 blocks."""
    bw = 2 * 18 - 1
    n = 18 * m
    a, b = np.triu_indices(18)
    k = np.arange(m)[:, None]
    r, c = (18 * k + a).ravel(), (18 * k + b).ravel()
    diag = (bw + r - c) * n + c
    aa, bb = np.meshgrid(np.arange(18), np.arange(18), indexing="ij")
    k = np.arange(m - 1)[:, None]
    r, c = (18 * k + aa.ravel()).ravel(), (18 * (k + 1) + bb.ravel()).ravel()
    off = (bw + r - c) * n + c
    return bw, (a, b), diag, off


# measured dense/banded crossover for the block-tridiagonal layout
BLOCK_DENSE_LIMIT = 54


class BlockNormalEquations:
    """Normal equations assembled directly from :class:`JacobianBlocks`.

    A pinned first node has fewer than 18 unknowns; it is padded to 18 with
    decoupled unit-diagonal unknowns whose solution is zero, which keeps the
    block-tridiagonal pattern uniform. Dense Cholesky below
    ``BLOCK_DENSE_LIMIT`` padded unknowns, banded Cholesky above.
    """

    def __init__(self, blocks: JacobianBlocks, e):
        D, C = blocks.D, blocks.C
        m = D.shape[0]
        c0 = blocks.first.shape[1]
        Dp = D.copy()
        Dp[0] = 0.0
        Dp[0][:, :c0] = blocks.first
        E = np.asarray(e, dtype=float).reshape(m, ROWS)
        Dt = Dp.transpose(0, 2, 1)
        Hd = Dt @ Dp
        b = (Dt @ E[:, :, None])[:, :, 0]
        Ho = None
        if m > 1:
            Cc = C[: m - 1]
            Ct = Cc.transpose(0, 2, 1)
            Hd[1:] += Ct @ Cc
            b[1:] += (Ct @ E[: m - 1, 16:28, None])[:, :, 0]
            Ho = Dt[: m - 1, :, 16:28] @ Cc
        pad = np.arange(c0, 18)
        Hd[0][pad, pad] = 1.0

        self.m, self.c0 = m, c0
        self.n = c0 + 18 * (m - 1)
        self.b_padded = b.ravel()
        self.b = np.concatenate([b[0, :c0], b[1:].ravel()])
        n_pad = 18 * m
        if n_pad < BLOCK_DENSE_LIMIT:
            H = np.zeros((n_pad, n_pad))
            for k in range(m):
                H[18 * k : 18 * k + 18, 18 * k : 18 * k + 18] = Hd[k]
            for k in range(m - 1):
                H[18 * k : 18 * k + 18, 18 * k + 18 : 18 * k + 36] = Ho[k]
                H[18 * k + 18 : 18 * k + 36, 18 * k : 18 * k + 18] = Ho[k].T
            self.H, self.banded = H, None
        else:
            bw, (a, bb), diag, off = _band_pattern(m)
            ab = np.zeros((bw + 1, n_pad))
            flat = ab.ravel()
            flat[diag] = Hd[:, a, bb].ravel()
            flat[off] = Ho.reshape(m - 1, -1).ravel()
            self.H, self.banded = None, ab

    def solve(self, lam: float) -> NDArray:
        if lam < 0:
            raise ValueError("damping must be non-negative")
        try:
            if self.banded is not None:
                ab = self.banded.copy()
                ab[-1] += lam
                x = scipy.linalg.solveh_banded(ab, self.b_padded, check_finite=False)
            else:
                A = self.H + lam * np.eye(self.H.shape[0])
                x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, check_finite=False), self.b_padded)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise FactorizationFailure(f"H + {lam:g} I is not positive definite") from exc
        return np.concatenate([x[: self.c0], x[18:]])


class OcpLeastSquares:
    """The problem restricted to an active node range, as seen by the solver.

    Residuals are pre-whitened, so the solver weight is the identity. Every
    active node contributes 28 rows; the continuity rows of the final
    trajectory node are identically zero.
    """

    weight = None

    def __init__(self, problem: OcpProblem, traj: FlatTrajectory, active_range=None, fd_step: float = 1e-6):
        n = len(traj)
        lo, hi = active_range if active_range is not None else (0, n - 1)
        if not 0 <= lo <= hi < n:
            raise ValueError("active range outside the mesh")
        self.problem = problem
        self.mesh = traj.mesh
        self.lo, self.hi, self.n = lo, hi, n
        self.Z = traj.nodes.copy()
        self.dts = np.ascontiguousarray(traj.mesh.dts)
        self.goals = np.ascontiguousarray(problem.goal_array(traj.mesh.times))
        self.pvec = problem.params.vector
        self.W = problem.weights.whitener
        self.fd_step = fd_step
        self.pinned = problem.x0 is not None and lo == 0

        m = hi - lo + 1
        c0 = layout.INPUT_DIM if self.pinned else layout.FLAT_DIM
        self.col_off = np.concatenate([[0], c0 + 18 * np.arange(m - 1)]).astype(int)
        self.n_vars = c0 + 18 * (m - 1)
        self.n_res = ROWS * m
        self._build_pattern(m, c0)

        first = 1 if self.pinned else 0
        yaw = [self.col_off[i] + layout.YAW for i in range(first, m)]
        self.angle_index = np.array(yaw, dtype=int)

    def _build_pattern(self, m: int, c0: int):
        r0, cc0 = np.meshgrid(np.arange(ROWS), np.arange(c0), indexing="ij")
        rows = [r0.ravel()]
        cols = [cc0.ravel()]
        rr, cc = np.meshgrid(np.arange(ROWS), np.arange(18), indexing="ij")
        for i in range(1, m):
            rows.append(ROWS * i + rr.ravel())
            cols.append(self.col_off[i] + cc.ravel())
        gr, gc = np.meshgrid(np.arange(16, 28), np.arange(18), indexing="ij")
        for i in range(m - 1):
            rows.append(ROWS * i + gr.ravel())
            cols.append(self.col_off[i + 1] + gc.ravel())
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)

    # decision vector <-> nodes

    def initial(self) -> NDArray:
        z = np.empty(self.n_vars)
        first = 0
        if self.pinned:
            _, u0 = recover(self.Z[0], self.problem.params)
            z[0:4] = u0.to_array()
            first = 1
        for i in range(first, self.hi - self.lo + 1):
            z[self.col_off[i] : self.col_off[i] + 18] = self.Z[self.lo + i]
        return z

    def _pinned_node(self, u0) -> NDArray:
        if u0[0] <= self.problem.params.eps_thrust:
            raise SingularFlatState("non-positive first thrust", node=0)
        return flat_from_state(self.problem.x0, ControlInput(u0[0], u0[1:4]), self.problem.params)

    def expand(self, z) -> NDArray:
        Z = self.Z.copy()
        m = self.hi - self.lo + 1
        first = 0
        if self.pinned:
            Z[0] = self._pinned_node(z[0:4])
            first = 1
        if m > first:
            Z[self.lo + first : self.hi + 1] = z[self.col_off[first] :].reshape(-1, 18)
        return Z

    def trajectory(self, z) -> FlatTrajectory:
        return FlatTrajectory(self.mesh, self.expand(z))

    # solver interface

    def raw_residuals(self, z) -> NDArray:
        raw, status = backend.ocp_residuals(self.expand(z), self.dts, self.goals, self.pvec, self.lo, self.hi)
        if status >= 0:
            raise SingularFlatState("singular flat node", node=status)
        return raw

    def residual(self, z) -> NDArray:
        return (self.raw_residuals(z) @ self.W.T).ravel()

    def cost(self, z) -> float:
        e = self.residual(z)
        return 0.5 * float(e @ e)

    def jacobian_blocks(self, z) -> JacobianBlocks:
        """Whitened per-node Jacobian blocks (the structured form of :meth:`jacobian`)."""
        Z = self.expand(z)
        D, C, status = backend.ocp_jacobian(Z, self.dts, self.goals, self.pvec, self.lo, self.hi, self.fd_step)
        if status >= 0:
            raise SingularFlatState("singular flat node in Jacobian", node=status)
        D = self.W @ D
        C = self.W[16:28, 16:28] @ C
        first = D[0] @ self._pin_tangent(z[0:4]) if self.pinned else D[0]
        return JacobianBlocks(first, D, C)

    def jacobian(self, z):
        return self.assemble(self.jacobian_blocks(z))

    def assemble(self, blocks: JacobianBlocks):
        """Sparse Jacobian from its blocks."""
        m = self.hi - self.lo + 1
        data = np.concatenate([blocks.first.ravel(), blocks.D[1:].ravel(), blocks.C[: m - 1].ravel()])
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.n_res, self.n_vars))

    def normal_equations(self, blocks: JacobianBlocks, e) -> BlockNormalEquations:
        return BlockNormalEquations(blocks, e)

    def _pin_tangent(self, u0) -> NDArray:
        h = self.fd_step
        U = np.repeat(np.asarray(u0, dtype=float)[None], 8, axis=0)
        U[0:4] += h * np.eye(4)
        U[4:8] -= h * np.eye(4)
        if not np.all(U[:, 0] > self.problem.params.eps_thrust):
            raise SingularFlatState("non-positive first thrust", node=0)
        F = flat_from_state_batch(self.problem.x0, U, self.problem.params)
        d = F[0:4] - F[4:8]
        d[:, layout.YAW] = wrap_angle(d[:, layout.YAW])
        return d.T / (2 * h)

    def boxplus(self, z, dz) -> NDArray:
        return boxplus(z, dz, self.angle_index)


def initial_guess(problem: OcpProblem) -> FlatTrajectory:
    """Straight-line guess from the current state to the goal, or reference samples.

    Without a measured state the regulation guess is the goal held constant.
    """
    mesh = problem.mesh
    times = mesh.times
    if problem.reference is not None:
        return FlatTrajectory(mesh, problem.reference_nodes(times))

    g_p = problem.goal.p
    g_yaw = problem.goal.yaw
    if problem.x0 is None:
        start_p, start_yaw = g_p, g_yaw
    else:
        start_p, start_yaw = problem.x0.p, problem.x0.yaw
    t_f = mesh.t_f
    vel = (g_p - start_p) / t_f
    dyaw = wrap_angle(g_yaw - start_yaw) / t_f
    nodes = np.zeros((mesh.n_nodes, layout.FLAT_DIM))
    nodes[:, layout.P] = start_p + np.outer(times, vel)
    nodes[:, layout.YAW] = wrap_angle(start_yaw + dyaw * times)
    nodes[:, layout.VEL] = vel
    nodes[:, layout.DYAW] = dyaw
    return FlatTrajectory(mesh, nodes)


def warm_start(prev: FlatTrajectory, dt_shift: float, mesh: TimeMesh | None = None) -> FlatTrajectory:
    """Previous solution advanced by ``dt_shift`` and sampled on ``mesh``.

    ``mesh`` defaults to the previous mesh. Beyond the previous horizon the
    last node is held.
    """
    if dt_shift < 0 or dt_shift >= prev.mesh.t_f:
        raise ValueError("shift must lie in [0, t_f)")
    mesh = mesh or prev.mesh
    nodes = np.array([prev.sample(t + dt_shift) for t in mesh.times])
    return FlatTrajectory(mesh, nodes)

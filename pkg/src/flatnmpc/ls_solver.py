"""Damped Gauss-Newton (Levenberg-Marquardt) least squares.

The error ``e`` is defined as prediction minus target, the step solves

    (J^T Ω J + λ I) δ = J^T Ω e

and the iterate is updated as ``z ⊞ (-δ)``. Problems expose ``residual``,
``jacobian``, ``weight`` and ``boxplus``; :class:`FunctionProblem` wraps a
plain residual function. Problems that also provide ``jacobian_blocks`` and
``normal_equations`` (whitened residuals, identity weight) skip the generic
sparse assembly unless ``LsConfig.structured`` is off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numpy.typing import NDArray

from flatnmpc.errors import DimensionMismatch, DivergenceError, FactorizationFailure, SingularFlatState

DENSE_LIMIT = 200


@dataclass
class ResidualBlock:
    r: NDArray
    weight: NDArray
    nodes: tuple[int, ...] = ()
    kind: str = ""

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).ravel()
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=float))

    def cost(self) -> float:
        return 0.5 * float(self.r @ self.weight @ self.r)


def stack_error(blocks: Sequence[ResidualBlock]) -> tuple[NDArray, sp.csr_matrix]:
    """Concatenate residual blocks and their weights (block diagonal)."""
    if not blocks:
        raise ValueError("no residual blocks")
    for b in blocks:
        if b.weight.shape != (b.r.size, b.r.size):
            raise DimensionMismatch(
                f"block {b.kind or '?'} at nodes {b.nodes}: residual of size {b.r.size} "
                f"with weight of shape {b.weight.shape}"
            )
    e = np.concatenate([b.r for b in blocks])
    omega = sp.block_diag([b.weight for b in blocks], format="csr")
    return e, omega


def numerical_jacobian(residual_fn: Callable[[NDArray], NDArray], z, h: float = 1e-6, sparsity=None):
    """Central-difference Jacobian, one column per coordinate.

    ``sparsity`` is an optional boolean (rows, cols) mask; entries outside it
    are dropped and a sparse matrix is returned.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    z = np.asarray(z, dtype=float)
    n = z.size
    e0 = np.asarray(residual_fn(z), dtype=float)
    J = np.empty((e0.size, n))
    zp = z.copy()
    for i in range(n):
        zp[i] = z[i] + h
        ep = np.array(residual_fn(zp), dtype=float)
        zp[i] = z[i] - h
        em = np.array(residual_fn(zp), dtype=float)
        zp[i] = z[i]
        J[:, i] = (ep - em) / (2.0 * h)
    if sparsity is not None:
        return sp.csr_matrix(np.where(np.asarray(sparsity, dtype=bool), J, 0.0))
    return J


def _weighted(J, omega):
    if omega is None:
        return J.T
    return (omega.T @ J).T if sp.issparse(J) or sp.issparse(omega) else J.T @ omega


class NormalEquations:
    """``H = J^T Ω J`` and ``b = J^T Ω e``, factorised once per damping value."""

    def __init__(self, J, omega, e):
        JtW = _weighted(J, omega)
        self.b = np.asarray(JtW @ e).ravel()
        H = JtW @ J
        self.n = self.b.size
        self.banded = None
        if sp.issparse(H) and self.n >= DENSE_LIMIT:
            H = H.tocoo()
            upper = H.row <= H.col
            rows, cols, vals = H.row[upper], H.col[upper], H.data[upper]
            bw = int((cols - rows).max()) if vals.size else 0
            if bw < self.n // 4:
                ab = np.zeros((bw + 1, self.n))
                np.add.at(ab, (bw + rows - cols, cols), vals)
                self.banded = ab
            else:
                H = H.toarray()
        elif sp.issparse(H):
            H = H.toarray()
        self.H = H

    def solve(self, lam: float) -> NDArray:
        if lam < 0:
            raise ValueError("damping must be non-negative")
        try:
            if self.banded is not None:
                ab = self.banded.copy()
                ab[-1] += lam
                return scipy.linalg.solveh_banded(ab, self.b, check_finite=False)
            A = np.asarray(self.H) + lam * np.eye(self.n)
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, check_finite=False), self.b)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise FactorizationFailure(f"H + {lam:g} I is not positive definite") from exc


def solve_damped(J, omega, e, lam: float) -> NDArray:
    """Solve ``(J^T Ω J + λ I) δ = J^T Ω e`` by Cholesky.

    Dense factorisation below 200 unknowns, banded Cholesky on the sparse
    normal matrix above. ``omega=None`` means identity weights.
    """
    return NormalEquations(J, omega, np.asarray(e, dtype=float)).solve(lam)


def boxplus(z, dz, angle_index=()) -> NDArray:
    """Vector addition with angle coordinates wrapped to ``(-pi, pi]``."""
    out = np.asarray(z, dtype=float) + np.asarray(dz, dtype=float)
    if len(angle_index):
        a = out[angle_index]
        out[angle_index] = np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))
    return out


class LeastSquaresProblem(Protocol):
    weight: object

    def residual(self, z: NDArray) -> NDArray: ...

    def jacobian(self, z: NDArray): ...

    def boxplus(self, z: NDArray, dz: NDArray) -> NDArray: ...


class FunctionProblem:
    """Least-squares problem from a residual function.

    The Jacobian defaults to dense central differences.
    """

    def __init__(self, residual_fn, weight=None, jacobian_fn=None, angle_index=(), h: float = 1e-6):
        self.residual_fn = residual_fn
        self.weight = weight
        self.jacobian_fn = jacobian_fn
        self.angle_index = np.asarray(angle_index, dtype=int)
        self.h = h

    def residual(self, z):
        return np.asarray(self.residual_fn(z), dtype=float)

    def jacobian(self, z):
        if self.jacobian_fn is not None:
            return self.jacobian_fn(z)
        return numerical_jacobian(self.residual_fn, z, self.h)

    def boxplus(self, z, dz):
        return boxplus(z, dz, self.angle_index)


@dataclass
class LsConfig:
    lambda0: float = 1e-3
    lambda_max: float = 1e8
    lambda_up: float = 4.0
    lambda_down: float = 2.0
    max_iterations: int = 15
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    fd_step: float = 1e-6
    structured: bool = True


@dataclass
class LsStats:
    iterations: int = 0
    cost_history: list = field(default_factory=list)
    lam: float = 0.0
    reason: str = ""
    t_jacobian: float = 0.0
    t_solve: float = 0.0
    t_residual: float = 0.0

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


def cost_of(e, omega=None) -> float:
    if omega is None:
        return 0.5 * float(e @ e)
    return 0.5 * float(e @ (omega @ e))


def optimize(problem: LeastSquaresProblem, z0, config: LsConfig | None = None) -> tuple[NDArray, LsStats]:
    """Iterate Jacobian, damped solve and update until a stopping rule fires.

    Steps are accepted only when they lower the cost, so the recorded cost
    history is non-increasing.
    """
    cfg = config or LsConfig()
    omega = getattr(problem, "weight", None)
    structured = hasattr(problem, "normal_equations") and (config is None or config.structured)
    stats = LsStats(lam=cfg.lambda0)
    z = np.array(z0, dtype=float)

    t = time.perf_counter()
    e = problem.residual(z)
    stats.t_residual += time.perf_counter() - t
    cost = cost_of(e, omega)
    stats.cost_history.append(cost)
    lam = cfg.lambda0

    for _ in range(cfg.max_iterations):
        t = time.perf_counter()
        if structured:
            J = problem.jacobian_blocks(z)
            t1 = time.perf_counter()
            normal = problem.normal_equations(J, e)
        else:
            J = problem.jacobian(z)
            t1 = time.perf_counter()
            normal = NormalEquations(J, omega, e)
        stats.t_jacobian += t1 - t
        stats.t_solve += time.perf_counter() - t1

        while True:
            t = time.perf_counter()
            dz = normal.solve(lam)
            stats.t_solve += time.perf_counter() - t
            if np.max(np.abs(dz), initial=0.0) < cfg.step_tol:
                stats.reason = "step"
                stats.lam = lam
                return z, stats
            z_new = problem.boxplus(z, -dz)
            t = time.perf_counter()
            try:
                e_new = problem.residual(z_new)
                cost_new = cost_of(e_new, omega)
            except SingularFlatState:
                cost_new = np.inf
            stats.t_residual += time.perf_counter() - t
            if cost_new < cost:
                lam = lam / cfg.lambda_down
                break
            lam = lam * cfg.lambda_up if lam > 0 else cfg.lambda0 or 1e-3
            if lam > cfg.lambda_max:
                stats.lam = lam
                raise DivergenceError("cost did not decrease before damping hit its ceiling", stats.cost_history)

        decrease = (cost - cost_new) / max(cost, np.finfo(float).tiny)
        z, e, cost = z_new, e_new, cost_new
        stats.iterations += 1
        stats.cost_history.append(cost)
        if decrease < cfg.cost_tol:
            stats.reason = "cost"
            break
    else:
        stats.reason = "max_iterations"
    stats.lam = lam
    return z, stats

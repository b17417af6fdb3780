"""Invariant suite run by ``flatnmpc validate`` and the acceptance tests.

Each check returns a :class:`CheckResult` instead of raising, so that a
caller can report every outcome.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from flatnmpc import layout
from flatnmpc._kernels import backend
from flatnmpc.errors import DivergenceError, SingularFlatState
from flatnmpc.flat_model import RigidBodyState, VehicleParams, recover, rot_z, wrap_angle
from flatnmpc.hermite import hermite_interpolate
from flatnmpc.ls_solver import LsConfig, optimize
from flatnmpc.mesh_refine import RefineConfig, discretization_error, refine
from flatnmpc.ocp import FlatTrajectory, OcpLeastSquares, OcpProblem, OcpWeights, TimeMesh, initial_guess
from flatnmpc.rigid_body import step_coarse

__all__ = [
    "CheckResult",
    "check_flat_round_trip",
    "check_hermite",
    "check_jacobian",
    "check_refinement_invariants",
    "polynomial_flat",
    "random_refine_instance",
    "run_invariant_suite",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (bound {self.bound:.3g}) {self.detail}".rstrip()


def polynomial_flat(coeffs_p, coeffs_yaw, t: float):
    """Flat node of a polynomial trajectory; coefficients in increasing power."""
    out = np.zeros(layout.FLAT_DIM)
    P = [np.asarray(coeffs_p, dtype=float)]
    Y = [np.asarray(coeffs_yaw, dtype=float)]
    for _ in range(4):
        c = P[-1]
        P.append(c[1:] * np.arange(1, len(c))[:, None] if len(c) > 1 else np.zeros((1, 3)))
    for _ in range(2):
        c = Y[-1]
        Y.append(c[1:] * np.arange(1, len(c)) if len(c) > 1 else np.zeros(1))
    powers = lambda n: t ** np.arange(n)
    vals = [powers(len(c)) @ c for c in P]
    yv = [powers(len(c)) @ c for c in Y]
    out[layout.P], out[layout.VEL], out[layout.ACC], out[layout.JERK], out[layout.SNAP] = vals
    out[layout.YAW], out[layout.DYAW], out[layout.DDYAW] = yv
    return out


def check_flat_round_trip(params: VehicleParams | None = None, seed: int = 0, duration: float = 1.0,
                          rate: float = 1000.0, tol: float = 1e-3) -> CheckResult:
    """Integrate the recovered inputs of a random polynomial trajectory and compare positions."""
    t_start = time.perf_counter()
    params = params or VehicleParams.firefly()
    rng = np.random.default_rng(seed)
    cp = np.vstack([rng.uniform(-1, 1, 3), rng.uniform(-1, 1, (5, 3)) * [[1.0], [0.5], [0.3], [0.2], [0.1]]])
    cy = np.concatenate([rng.uniform(-np.pi, np.pi, 1), rng.uniform(-0.5, 0.5, 3)])
    n = int(round(duration * rate))
    dt = duration / n
    nodes = np.array([polynomial_flat(cp, cy, k * dt) for k in range(n + 1)])
    x, _ = recover(nodes[0], params)
    worst = 0.0
    for k in range(n):
        _, u = recover(nodes[k], params)
        x = step_coarse(x, u, dt, params)
        worst = max(worst, float(np.linalg.norm(x.p - nodes[k + 1][layout.P])))
    return CheckResult("flat round trip", worst <= tol, worst, tol, f"max position error over {duration:g} s [m]",
                       time.perf_counter() - t_start)


def _random_problem(rng, params, n: int, pinned: bool, tracking: bool = False):
    t_f = rng.uniform(0.5, 3.0)
    mesh = TimeMesh.uniform(t_f, n)
    goal_p = rng.uniform(-2, 2, 3)
    goal_yaw = rng.uniform(-np.pi, np.pi)
    x0 = None
    if pinned:
        x0 = RigidBodyState(rng.uniform(-1, 1, 3), rng.normal(0, 0.3, 3),
                            rot_z(rng.uniform(-np.pi, np.pi)), rng.normal(0, 0.1, 3))
    u_ref = np.array([params.hover_thrust, 0, 0, 0])
    goal = RigidBodyState.hover(goal_p, goal_yaw)
    return OcpProblem(mesh, params, OcpWeights.default(), goal=goal, x0=x0, u_ref=u_ref)


def _perturbed_guess(rng, problem, scale: float = 0.05):
    traj = initial_guess(problem)
    nodes = traj.nodes + scale * rng.normal(size=traj.nodes.shape)
    return FlatTrajectory(traj.mesh, nodes)


def check_jacobian(n_points: int = 100, seed: int = 0, tol: float = 1e-3,
                   params: VehicleParams | None = None) -> CheckResult:
    """``J^T e`` against central differences of the scalar cost at random points."""
    t_start = time.perf_counter()
    params = params or VehicleParams.firefly()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_points):
        problem = _random_problem(rng, params, int(rng.integers(2, 5)), pinned=bool(i % 2))
        ls = OcpLeastSquares(problem, _perturbed_guess(rng, problem))
        z = ls.initial()
        grad = ls.jacobian(z).T @ ls.residual(z)
        h = 1e-6
        fd = np.empty_like(z)
        for j in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            fd[j] = (ls.cost(zp) - ls.cost(zm)) / (2 * h)
        rel = float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, rel)
    return CheckResult("jacobian vs cost gradient", worst <= tol, worst, tol,
                       f"worst relative error over {n_points} points", time.perf_counter() - t_start)


def check_hermite(n_params: int = 10, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """Endpoint interpolation and cubic reproduction."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        zi, zj = rng.normal(size=18), rng.normal(size=18)
        zi[layout.YAW], zj[layout.YAW] = rng.uniform(-1, 1, 2)
        dt = rng.uniform(0.05, 2.0)
        worst = max(worst, np.abs(hermite_interpolate(zi, zj, dt, 0.0) - zi).max())
        worst = max(worst, np.abs(hermite_interpolate(zi, zj, dt, 1.0) - zj).max())

        # cubic in time for position and yaw; yaw must turn by less than pi per interval
        c = rng.normal(size=(4, 4))
        c[:, layout.YAW] *= 0.25
        t0 = rng.uniform(0, 1)
        dt = rng.uniform(0.05, 1.0)

        def sample(t):
            tau = t - t0
            v = c[0] + c[1] * tau + c[2] * tau**2 + c[3] * tau**3
            d = c[1] + 2 * c[2] * tau + 3 * c[3] * tau**2
            out = np.zeros(18)
            out[[0, 1, 2, 3]] = v
            out[[4, 5, 6, 16]] = d
            return out

        a, b = sample(t0), sample(t0 + dt)
        s = rng.uniform(0, 1)
        got = hermite_interpolate(a, b, dt, s)
        want = sample(t0 + s * dt)
        diff = got - want
        diff[layout.YAW] = wrap_angle(diff[layout.YAW])
        idx = [0, 1, 2, 3, 4, 5, 6, 16]
        worst = max(worst, np.abs(diff[idx]).max() / max(1.0, np.abs(want[idx]).max()))
    return CheckResult("hermite endpoints and cubic reproduction", worst <= tol, worst, tol, "",
                       time.perf_counter() - t_start)


# refine requires a regular converged solution; instances whose optimum
# approaches free fall are redrawn
MIN_THRUST_FRACTION = 0.25


def random_refine_instance(rng, params: VehicleParams | None = None):
    """A converged coarse regulation solution with a random goal, mesh and start.

    Instances with any node thrust below ``MIN_THRUST_FRACTION`` of hover are
    redrawn from the same generator.
    """
    params = params or VehicleParams.firefly()
    while True:
        n = int(rng.integers(3, 12))
        problem = _random_problem(rng, params, n, pinned=bool(rng.integers(0, 2)))
        ls = OcpLeastSquares(problem, initial_guess(problem))
        z, _ = optimize(ls, ls.initial(), LsConfig(max_iterations=8))
        cfg = RefineConfig(
            err_trs=float(10 ** rng.uniform(-7, -3)),
            max_iter=int(rng.integers(1, 4)),
            n_i=int(rng.integers(1, n)),
            n_add_max=None if rng.uniform() < 0.5 else int(rng.integers(0, n + 1)),
        )
        traj = ls.trajectory(z)
        _, inputs, _ = backend.recover(traj.nodes, params.vector)
        if inputs[:, 0].min() >= MIN_THRUST_FRACTION * params.hover_thrust:
            return traj, problem, cfg


def refinement_violations(traj, problem, cfg: RefineConfig) -> list[str]:
    """Invariants of one refinement call that do not hold."""
    try:
        out, stats = refine(traj, problem, cfg, LsConfig(max_iterations=8))
    except (DivergenceError, SingularFlatState) as exc:
        return [f"solver error: {exc}"]
    bad = []
    n = traj.mesh.n_intervals
    n_tm = min(cfg.n_i, n - 1)
    t_tm = traj.mesh.times[n_tm]
    old_t, new_t = traj.mesh.times, out.mesh.times
    if not np.all(np.isin(old_t, new_t)):
        bad.append("node conservation")
    inserted = np.setdiff1d(new_t, old_t)
    if inserted.size != stats.nodes_added or len(out) != len(traj) + stats.nodes_added:
        bad.append("node count bookkeeping")
    if inserted.size and not (inserted.min() >= old_t[0] and inserted.max() <= t_tm):
        bad.append("locality")
    shift = stats.nodes_added
    if not np.array_equal(out.nodes[n_tm + 1 + shift :], traj.nodes[n_tm + 1 :]) or not np.array_equal(
        new_t[n_tm + 1 + shift :], old_t[n_tm + 1 :]
    ):
        bad.append("tail immutability")
    cap = n if cfg.n_add_max is None else cfg.n_add_max
    if stats.nodes_added > min(cap, n_tm * cfg.max_iter):
        bad.append("bounded growth")
    before = discretization_error(traj, problem.params, (0, n_tm), cfg.compare_order, cfg.n_fine).max
    after = discretization_error(out, problem.params, (0, n_tm + shift), cfg.compare_order, cfg.n_fine).max
    if after > before:
        bad.append("max error increased")
    return bad


def check_refinement_invariants(n_instances: int = 100, seed: int = 0,
                                params: VehicleParams | None = None) -> CheckResult:
    """Refinement invariants on random converged instances; value is the violation count."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(seed)
    violations, refined = [], 0
    for i in range(n_instances):
        traj, problem, cfg = random_refine_instance(rng, params)
        bad = refinement_violations(traj, problem, cfg)
        violations.extend(f"#{i}: {b}" for b in bad)
    detail = f"{n_instances} instances" + (f"; {', '.join(violations[:5])}" if violations else "")
    return CheckResult("refinement invariants", not violations, float(len(violations)), 0.0, detail,
                       time.perf_counter() - t_start)


def run_invariant_suite(quick: bool = False, seed: int = 0) -> list[CheckResult]:
    """Every check at its acceptance setting, or at reduced counts with ``quick``."""
    return [
        check_flat_round_trip(seed=seed),
        check_jacobian(n_points=10 if quick else 100, seed=seed),
        check_hermite(seed=seed),
        check_refinement_invariants(n_instances=10 if quick else 100, seed=seed),
    ]

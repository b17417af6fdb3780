"""Receding-horizon controller and closed-loop simulation.

Every control period the controller pins the first plan node to the
measurement, warm-starts from the previous plan, solves the coarse problem,
optionally refines the head of the horizon, and applies the first input. The
plant is the same rigid body integrated with the fine step rule.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from flatnmpc import layout
from flatnmpc.errors import DivergenceError, FactorizationFailure, SingularFlatState, SolveFailure
from flatnmpc.flat_model import (
    ControlInput,
    RigidBodyState,
    VehicleParams,
    euler_zyx,
    hat,
    recover,
    recover_state,
    wrap_angle,
)
from flatnmpc.ls_solver import LsConfig, optimize
from flatnmpc.mesh_refine import RefineConfig, RefineStats, refine
from flatnmpc.ocp import (
    FlatTrajectory,
    OcpLeastSquares,
    OcpProblem,
    OcpWeights,
    TimeMesh,
    initial_guess,
    warm_start,
)
from flatnmpc.rigid_body import N_FINE, step_fine

_SOLVER_ERRORS = (DivergenceError, SingularFlatState, FactorizationFailure)


@dataclass
class NmpcConfig:
    """Controller settings.

    ``applied_input`` is ``"first"`` (input of the first plan node, held for
    the control period) or ``"resample"`` (plan input at ``t = dt_ctrl``).
    ``hover_input_ref`` measures the input residual from the hover input.
    """

    t_f: float = 2.0
    n: int = 20
    dt_ctrl: float = 0.02
    solver: LsConfig = field(default_factory=LsConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_enabled: bool = False
    weights: OcpWeights = field(default_factory=OcpWeights.default)
    applied_input: str = "first"
    hover_input_ref: bool = True
    warm_start: bool = True
    max_consecutive_failures: int = 3

    def __post_init__(self):
        if not self.t_f > 0:
            raise ValueError("horizon must be positive")
        if self.n < 2:
            raise ValueError("need at least two intervals")
        if not self.dt_ctrl > 0:
            raise ValueError("dt_ctrl must be positive")
        if self.dt_ctrl >= self.t_f:
            raise ValueError("dt_ctrl must be shorter than the horizon")
        if self.applied_input not in ("first", "resample"):
            raise ValueError("applied_input must be 'first' or 'resample'")
        if self.refine_enabled and not 1 <= self.refine.n_i < self.n:
            raise ValueError("refined segment must satisfy 1 <= n_i < n")


def lemniscate(t: float) -> NDArray:
    """Figure-eight reference with analytic derivatives; the position repeats every 4 pi."""
    s2, c2 = np.sin(t / 2), np.cos(t / 2)
    s1, c1 = np.sin(t), np.cos(t)
    s5, c5 = np.sin(t + 5), np.cos(t + 5)
    out = np.empty(layout.FLAT_DIM)
    out[layout.P] = (2 * s2, s1, s5 / 3)
    out[layout.YAW] = np.sin(t / 8)
    out[layout.VEL] = (c2, c1, c5 / 3)
    out[layout.ACC] = (-s2 / 2, -s1, -s5 / 3)
    out[layout.JERK] = (-c2 / 4, -c1, -c5 / 3)
    out[layout.SNAP] = (s2 / 8, s1, s5 / 3)
    out[layout.DYAW] = np.cos(t / 8) / 8
    out[layout.DDYAW] = -np.sin(t / 8) / 64
    return out


LEMNISCATE_PERIOD = 8 * np.pi


@dataclass
class RegulationTask:
    goal_p: NDArray = field(default_factory=lambda: np.array([2.0, 2.0, 1.0]))
    goal_yaw: float = 1.57
    start_p: NDArray = field(default_factory=lambda: np.zeros(3))
    start_yaw: float = 0.0
    name: str = "regulation"

    def __post_init__(self):
        self.goal_p = np.asarray(self.goal_p, dtype=float)
        self.start_p = np.asarray(self.start_p, dtype=float)

    def initial_state(self, params: VehicleParams) -> RigidBodyState:
        return RigidBodyState.hover(self.start_p, self.start_yaw)

    def reference_pose(self, t: float) -> tuple[NDArray, float]:
        return self.goal_p, self.goal_yaw

    def problem(self, mesh, params, weights, t0, x0, u_ref=None) -> OcpProblem:
        goal = RigidBodyState.hover(self.goal_p, self.goal_yaw)
        return OcpProblem(mesh, params, weights, goal=goal, t0=t0, x0=x0, u_ref=u_ref)


@dataclass
class TrackingTask:
    reference: Callable[[float], NDArray] = lemniscate
    name: str = "lemniscate"

    def initial_state(self, params: VehicleParams) -> RigidBodyState:
        return recover_state(self.reference(0.0), params)

    def reference_pose(self, t: float) -> tuple[NDArray, float]:
        r = self.reference(t)
        return r[layout.P], float(r[layout.YAW])

    def problem(self, mesh, params, weights, t0, x0, u_ref=None) -> OcpProblem:
        return OcpProblem(mesh, params, weights, reference=self.reference, t0=t0, x0=x0, u_ref=u_ref)


@dataclass
class CycleResult:
    """Outcome of one cycle.

    ``t_jacobian`` and ``t_solve`` cover the coarse solve and the refinement
    re-solves; ``t_refine`` is the remaining refinement time (error checks,
    insertion, setup). All times in seconds except ``solve_ms``.
    """

    trajectory: FlatTrajectory
    applied: ControlInput
    solve_ms: float
    refine_stats: RefineStats | None
    cost_history: list
    iterations: int = 0
    t_jacobian: float = 0.0
    t_solve: float = 0.0
    t_refine: float = 0.0
    refine_error: str = ""

    def __post_init__(self):
        if self.solve_ms < 0:
            raise ValueError("solve time must be non-negative")

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


def nmpc_cycle(
    measured: RigidBodyState,
    problem: OcpProblem,
    prev: FlatTrajectory | None,
    cfg: NmpcConfig,
) -> CycleResult:
    """One control cycle on ``problem`` (whose ``x0`` is replaced by ``measured``).

    Raises :class:`SolveFailure` when the coarse solve fails. A failing
    refinement falls back to the coarse plan and is reported in the result.
    """
    t0 = time.perf_counter()
    problem = _with_measurement(problem, measured)
    if prev is not None and cfg.warm_start:
        guess = warm_start(prev, cfg.dt_ctrl, problem.mesh)
    else:
        guess = initial_guess(problem)

    try:
        ls = OcpLeastSquares(problem, guess, fd_step=cfg.solver.fd_step)
        z, stats = optimize(ls, ls.initial(), cfg.solver)
    except _SOLVER_ERRORS as exc:
        history = getattr(exc, "cost_history", None) or []
        raise SolveFailure(f"coarse solve failed: {exc}", history) from exc
    traj = ls.trajectory(z)

    rstats, refine_error = None, ""
    t_refine = 0.0
    if cfg.refine_enabled:
        t1 = time.perf_counter()
        try:
            traj, rstats = refine(traj, problem, cfg.refine, cfg.solver)
        except _SOLVER_ERRORS as exc:
            refine_error = str(exc)
        t_refine = time.perf_counter() - t1
        if rstats is not None:
            t_refine = max(t_refine - rstats.t_jacobian - rstats.t_solve, 0.0)

    if cfg.applied_input == "first":
        _, u = recover(traj.nodes[0], problem.params)
    else:
        _, u = recover(traj.sample(cfg.dt_ctrl), problem.params)
    solve_ms = 1e3 * (time.perf_counter() - t0)
    return CycleResult(
        trajectory=traj,
        applied=u,
        solve_ms=solve_ms,
        refine_stats=rstats,
        cost_history=list(stats.cost_history),
        iterations=stats.iterations,
        t_jacobian=stats.t_jacobian + (rstats.t_jacobian if rstats else 0.0),
        t_solve=stats.t_solve + (rstats.t_solve if rstats else 0.0),
        t_refine=t_refine,
        refine_error=refine_error,
    )


def _with_measurement(problem: OcpProblem, measured: RigidBodyState) -> OcpProblem:
    return OcpProblem(
        problem.mesh, problem.params, problem.weights, goal=problem.goal,
        reference=problem.reference, t0=problem.t0, x0=measured, u_ref=problem.u_ref,
    )


class NmpcController:
    """Stateful wrapper that keeps the previous plan for warm starting."""

    def __init__(self, task, params: VehicleParams, cfg: NmpcConfig):
        self.task = task
        self.params = params
        self.cfg = cfg
        self.prev: FlatTrajectory | None = None
        self.mesh = TimeMesh.uniform(cfg.t_f, cfg.n)
        self.u_ref = np.array([params.hover_thrust, 0, 0, 0]) if cfg.hover_input_ref else None

    def reset(self):
        self.prev = None

    def problem(self, t: float, measured: RigidBodyState) -> OcpProblem:
        return self.task.problem(self.mesh, self.params, self.cfg.weights, t, measured, self.u_ref)

    def step(self, t: float, measured: RigidBodyState) -> CycleResult:
        result = nmpc_cycle(measured, self.problem(t, measured), self.prev, self.cfg)
        self.prev = result.trajectory
        return result


LOG_COLUMNS = (
    ["t", "px", "py", "pz", "yaw", "ref_px", "ref_py", "ref_pz", "ref_yaw"]
    + ["thrust", "tau_x", "tau_y", "tau_z", "roll_ref", "pitch_ref", "yaw_rate_ref"]
    + ["cost", "lm_iterations", "nodes_added", "solve_ok"]
)
TIMING_COLUMNS = ["t", "solve_ms", "jacobian_ms", "linear_solve_ms", "refine_ms"]


@dataclass
class EpisodeLog:
    """Per-cycle records of a closed-loop run.

    ``rows`` holds the deterministic quantities, ``timings`` the wall-clock
    ones; they are kept apart so that result files are reproducible.
    """

    task: str = ""
    n: int = 0
    refined: bool = False
    seed: int = 0
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> NDArray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def timing(self, name: str) -> NDArray:
        i = TIMING_COLUMNS.index(name)
        return np.array([r[i] for r in self.timings], dtype=float)

    def positions(self) -> NDArray:
        return np.array([r[1:4] for r in self.rows], dtype=float).reshape(-1, 3)

    def write_csv(self, path, timing_path=None):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])
        if timing_path is not None:
            Path(timing_path).parent.mkdir(parents=True, exist_ok=True)
            with open(timing_path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(TIMING_COLUMNS)
                for r in self.timings:
                    w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.6g" % v


def _perturb(x: RigidBodyState, rng, std: float) -> RigidBodyState:
    noise = rng.normal(0.0, std, size=12)
    w = noise[6:9]
    theta = np.linalg.norm(w)
    K = hat(w / theta) if theta > 0 else np.zeros((3, 3))
    dR = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K
    return RigidBodyState(x.p + noise[0:3], x.v + noise[3:6], x.R @ dR, x.omega + noise[9:12])


def _diverged(x: RigidBodyState, ref_p, limit: float) -> str:
    arr = x.to_array()
    if not np.all(np.isfinite(arr)):
        return "non-finite state"
    if np.linalg.norm(x.p - ref_p) > limit:
        return "position error above limit"
    if x.R[2, 2] <= 0:
        return "vehicle inverted"
    return ""


def run_closed_loop(
    task,
    cfg: NmpcConfig,
    duration: float,
    params: VehicleParams | None = None,
    seed: int = 0,
    noise_std: float = 0.0,
    n_fine: int = N_FINE,
    divergence_limit: float = 10.0,
) -> EpisodeLog:
    """Alternate controller cycles and fine plant steps for ``duration`` seconds.

    The episode fails after more than ``cfg.max_consecutive_failures``
    consecutive solve failures (the previous input is re-applied meanwhile)
    or when the plant diverges.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    episode = closed_loop_episode(task, cfg, duration, params, seed, noise_std, n_fine, divergence_limit)
    for log in episode:
        pass
    return log


def closed_loop_episode(
    task,
    cfg: NmpcConfig,
    duration: float,
    params: VehicleParams | None = None,
    seed: int = 0,
    noise_std: float = 0.0,
    n_fine: int = N_FINE,
    divergence_limit: float = 10.0,
):
    """:func:`run_closed_loop` as a generator yielding the log after every cycle.

    Lets several episodes be advanced in lockstep, e.g. to expose them to the
    same machine load when timing them.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    params = params or VehicleParams.firefly()
    rng = np.random.default_rng(seed)
    log = EpisodeLog(task=getattr(task, "name", ""), n=cfg.n, refined=cfg.refine_enabled, seed=seed)
    ctrl = NmpcController(task, params, cfg)
    x = task.initial_state(params)
    u = ControlInput(params.hover_thrust)
    n_cycles = int(round(duration / cfg.dt_ctrl))
    failures = 0
    if n_cycles == 0:
        yield log
        return

    for i in range(n_cycles):
        t = i * cfg.dt_ctrl
        ref_p, ref_yaw = task.reference_pose(t)
        try:
            res = ctrl.step(t, x)
            failures = 0
            u = res.applied
            ok = True
        except SolveFailure as exc:
            failures += 1
            ctrl.reset()
            ok = False
            res = None
            if failures > cfg.max_consecutive_failures:
                log.failed = True
                log.failure = f"{failures} consecutive solve failures at t={t:.2f}: {exc}"

        if res is not None:
            try:
                x_ref = recover_state(res.trajectory.sample(cfg.dt_ctrl), params)
                roll, pitch, _ = euler_zyx(x_ref.R)
                yaw_rate = float(res.trajectory.sample(cfg.dt_ctrl)[layout.DYAW])
            except SingularFlatState:
                roll = pitch = yaw_rate = np.nan
            log.rows.append(
                [t, *x.p, x.yaw, *ref_p, ref_yaw, *u.to_array(), roll, pitch, yaw_rate,
                 res.cost, res.iterations, res.refine_stats.nodes_added if res.refine_stats else 0, True]
            )
            log.timings.append(
                [t, res.solve_ms, 1e3 * res.t_jacobian, 1e3 * res.t_solve, 1e3 * res.t_refine]
            )
        else:
            log.rows.append(
                [t, *x.p, x.yaw, *ref_p, ref_yaw, *u.to_array(), np.nan, np.nan, np.nan,
                 np.nan, 0, 0, ok]
            )
            log.timings.append([t, np.nan, np.nan, np.nan, np.nan])
        if log.failed:
            yield log
            return

        x = step_fine(x, u, cfg.dt_ctrl, params, n_fine)
        if noise_std > 0:
            x = _perturb(x, rng, noise_std)
        reason = _diverged(x, task.reference_pose(t + cfg.dt_ctrl)[0], divergence_limit)
        if reason:
            log.failed = True
            log.failure = f"{reason} at t={t + cfg.dt_ctrl:.2f}"
        yield log
        if log.failed:
            return


@dataclass
class Metrics:
    err_trans: float
    err_rot: float
    mean_roll: float
    mean_pitch: float
    mean_yaw_rate: float
    mean_thrust: float
    runtime_ms: float
    status: str = "ok"


def compute_metrics(log: EpisodeLog, reference: EpisodeLog | None = None) -> Metrics:
    """RMSE of position and yaw against the logged references (or another run).

    With ``reference`` the errors are measured against that run's positions
    and yaw at the same cycles. Attitude, yaw-rate and thrust columns are
    means of absolute values (thrust is positive anyway).
    """
    if len(log) == 0:
        raise ValueError("empty log")
    if log.failed:
        nan = float("nan")
        return Metrics(nan, nan, nan, nan, nan, nan, nan, "fail")
    p = log.positions()
    yaw = log.column("yaw")
    if reference is not None:
        m = min(len(log), len(reference))
        p, yaw = p[:m], yaw[:m]
        ref_p, ref_yaw = reference.positions()[:m], reference.column("yaw")[:m]
    else:
        ref_p = np.stack([log.column("ref_px"), log.column("ref_py"), log.column("ref_pz")], axis=1)
        ref_yaw = log.column("ref_yaw")
    err_trans = float(np.sqrt(np.mean(np.sum((p - ref_p) ** 2, axis=1))))
    err_rot = float(np.sqrt(np.mean(wrap_angle(yaw - ref_yaw) ** 2)))
    solve = log.timing("solve_ms") if log.timings else np.array([np.nan])
    return Metrics(
        err_trans=err_trans,
        err_rot=err_rot,
        mean_roll=float(np.nanmean(np.abs(log.column("roll_ref")))),
        mean_pitch=float(np.nanmean(np.abs(log.column("pitch_ref")))),
        mean_yaw_rate=float(np.nanmean(np.abs(log.column("yaw_rate_ref")))),
        mean_thrust=float(np.mean(log.column("thrust"))),
        runtime_ms=float(np.nanmean(solve)),
    )

"""Experiment drivers: pose regulation, lemniscate tracking, runtime sweep.

Results files hold only deterministic quantities; wall-clock figures go to
separate ``*_timing.csv`` files so that result files can be compared byte for
byte across runs.
"""

from __future__ import annotations

import ast
import configparser
import csv
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from flatnmpc.errors import ConfigError
from flatnmpc.flat_model import VehicleParams
from flatnmpc.ls_solver import LsConfig
from flatnmpc.mesh_refine import RefineConfig
from flatnmpc.nmpc_runtime import (
    LEMNISCATE_PERIOD,
    EpisodeLog,
    Metrics,
    NmpcConfig,
    RegulationTask,
    TrackingTask,
    _fmt,
    compute_metrics,
    closed_loop_episode,
    run_closed_loop,
)
from flatnmpc.ocp import OcpWeights

KINDS = ("regulation", "lemniscate", "runtime_sweep")

RESULT_COLUMNS = [
    "N", "refined", "err_trans", "err_rot", "mean_roll", "mean_pitch",
    "mean_yaw_rate", "mean_thrust", "status", "seed",
]
TIMING_COLUMNS = ["N", "refined", "runtime_ms"]


@dataclass
class ExperimentConfig:
    """Everything an experiment needs; loadable from an INI file.

    ``refine`` of ``None`` runs both modes. ``duration`` of ``None`` uses the
    experiment default (6 s regulation, one lemniscate period).
    """

    kind: str = "regulation"
    out_dir: str = "results"
    seed: int = 0
    # vehicle
    mass: float = 1.55
    inertia: tuple = (0.0347563, 0.0458929, 0.0977)
    gravity: float = 9.81
    # controller
    t_f: float = 2.0
    n: int = 20
    dt_ctrl: float = 0.02
    duration: float | None = None
    refine: bool | None = None
    applied_input: str = "first"
    noise_std: float = 0.0
    # weights (diagonals)
    q: tuple = (10, 10, 10, 1, 1, 1, 5, 5, 5, 0.1, 0.1, 0.1)
    r_w: tuple = (0.1, 1, 1, 1)
    a_l: float = 1e6
    # solver
    lambda0: float = 1e-3
    lambda_max: float = 1e8
    max_iterations: int = 15
    step_tol: float = 1e-8
    cost_tol: float = 1e-9
    fd_step: float = 1e-6
    # refinement
    err_trs: float = 1e-5
    max_iter: int = 2
    n_i: int = 2
    n_add_max: int | None = None
    compare_order: int = 2
    n_fine: int = 10
    # regulation
    goal: tuple = (2.0, 2.0, 1.0, 1.57)
    n_values: tuple = (100, 50, 20, 10, 5)
    reference_n: int = 200
    # runtime sweep
    horizons: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
    node_spacing: float = 0.2
    trajectories: int = 500

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {', '.join(KINDS)}")
        if self.kind == "regulation" and not self.n_values:
            raise ConfigError("n_values must not be empty")
        if self.kind == "runtime_sweep" and not self.horizons:
            raise ConfigError("horizons must not be empty")
        if self.trajectories < 1:
            raise ConfigError("trajectories must be positive")
        if len(self.q) != 12 or len(self.r_w) != 4 or len(self.goal) != 4 or len(self.inertia) not in (3, 9):
            raise ConfigError("q needs 12 entries, r_w 4, goal 4 and inertia 3 or 9")
        if self.kind == "runtime_sweep":
            settings = [(sweep_nodes(h, self.node_spacing), h) for h in self.horizons]
        else:
            ns = self.n_values if self.kind == "regulation" else (self.n,)
            settings = [(n, self.t_f) for n in ns]
        try:
            self.vehicle()
            for n, t_f in settings:
                self.nmpc(n=n, t_f=t_f, refine=False)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # builders

    def vehicle(self) -> VehicleParams:
        I = np.diag(self.inertia) if len(self.inertia) == 3 else np.reshape(self.inertia, (3, 3))
        return VehicleParams(self.mass, I, self.gravity)

    def weights(self) -> OcpWeights:
        return OcpWeights(np.array(self.q, dtype=float), np.array(self.r_w, dtype=float), self.a_l)

    def solver(self) -> LsConfig:
        return LsConfig(
            lambda0=self.lambda0, lambda_max=self.lambda_max, max_iterations=self.max_iterations,
            step_tol=self.step_tol, cost_tol=self.cost_tol, fd_step=self.fd_step,
        )

    def refine_cfg(self) -> RefineConfig:
        return RefineConfig(
            err_trs=self.err_trs, max_iter=self.max_iter, n_i=self.n_i, n_add_max=self.n_add_max,
            compare_order=self.compare_order, n_fine=self.n_fine,
        )

    def nmpc(self, n: int | None = None, t_f: float | None = None, refine: bool = False) -> NmpcConfig:
        return NmpcConfig(
            t_f=t_f or self.t_f, n=n or self.n, dt_ctrl=self.dt_ctrl, solver=self.solver(),
            refine=self.refine_cfg(), refine_enabled=refine, weights=self.weights(),
            applied_input=self.applied_input,
        )

    def modes(self) -> list[bool]:
        return [False, True] if self.refine is None else [self.refine]


# config file loading

_SECTIONS = {
    "experiment": ("kind", "out_dir", "seed"),
    "vehicle": ("mass", "inertia", "gravity"),
    "controller": ("t_f", "n", "dt_ctrl", "duration", "refine", "applied_input", "noise_std"),
    "weights": ("q", "r_w", "a_l"),
    "solver": ("lambda0", "lambda_max", "max_iterations", "step_tol", "cost_tol", "fd_step"),
    "refinement": ("err_trs", "max_iter", "n_i", "n_add_max", "compare_order", "n_fine"),
    "regulation": ("goal", "n_values", "reference_n"),
    "sweep": ("horizons", "node_spacing", "trajectories"),
}


def _key_lines(text: str) -> dict:
    """(section, key) -> line number, for error messages."""
    lines, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section:
            lines[(section, m.group(1).strip().lower())] = (i, line)
    return lines


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", "auto", "both") and name in ("duration", "refine", "n_add_max"):
        return None
    if name == "refine" or isinstance(default, bool):
        low = raw.lower()
        if low in ("on", "true", "yes", "1"):
            return True
        if low in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"expected on/off, got {raw!r}")
    if isinstance(default, tuple):
        items = [x for x in re.split(r"[,\s]+", raw) if x]
        conv = int if default and all(isinstance(x, int) for x in default) else float
        return tuple(conv(x) for x in items)
    if isinstance(default, int) or name in ("n_add_max",):
        return int(raw)
    if isinstance(default, float) or name == "duration":
        return float(raw)
    return raw


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI experiment config; errors carry file and line context."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path), overrides)


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: expected a [section] header before {exc.line.strip()!r}") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        try:
            line = ast.literal_eval(line)
        except (ValueError, SyntaxError):
            pass
        raise ConfigError(f"{source}:{lineno}: cannot parse line {str(line).strip()!r}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    where = _key_lines(text)
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            lineno, line = where.get((section, key), (0, ""))
            ctx = f"{source}:{lineno}: {line.strip()!r}"
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{ctx}: unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(key, raw, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"{ctx}: {exc}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid configuration ({exc})") from exc


# results

@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def add(self, n: int, refined: bool, metrics: Metrics, seed: int):
        if any(r[0] == n and r[1] == int(refined) for r in self.rows):
            raise ValueError(f"duplicate row for N={n}, refined={refined}")
        m = metrics
        self.rows.append(
            [n, int(refined), m.err_trans, m.err_rot, m.mean_roll, m.mean_pitch,
             m.mean_yaw_rate, m.mean_thrust, m.status, seed]
        )
        self.timings.append([n, int(refined), m.runtime_ms])

    def row(self, n: int, refined: bool) -> dict:
        for r in self.rows:
            if r[0] == n and r[1] == int(refined):
                return dict(zip(RESULT_COLUMNS, r))
        raise KeyError((n, refined))

    @property
    def any_failed(self) -> bool:
        return any(r[8] == "fail" for r in self.rows)

    def write(self, path, timing_path=None):
        _write_csv(path, RESULT_COLUMNS, self.rows)
        if timing_path is not None:
            _write_csv(timing_path, TIMING_COLUMNS, self.timings)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def _metrics_or_fail(log: EpisodeLog, reference: EpisodeLog | None) -> Metrics:
    if log.failed or len(log) == 0:
        nan = float("nan")
        return Metrics(nan, nan, nan, nan, nan, nan, nan, "fail")
    return compute_metrics(log, reference)


def run_regulation_suite(cfg: ExperimentConfig, write: bool = True) -> tuple[ResultsTable, dict]:
    """Regulation to the configured goal for every N and mode.

    Errors are measured against the unrefined run with ``reference_n`` nodes
    (or against the goal when ``reference_n`` is 0). Returns the table and
    the episode logs keyed by ``(N, refined)``.
    """
    params = cfg.vehicle()
    goal = cfg.goal
    task = RegulationTask(goal_p=np.array(goal[:3]), goal_yaw=goal[3])
    duration = 6.0 if cfg.duration is None else cfg.duration
    out = Path(cfg.out_dir)

    def episode(n, refine):
        log = run_closed_loop(task, cfg.nmpc(n=n, refine=refine), duration, params, cfg.seed, cfg.noise_std, cfg.n_fine)
        if write:
            tag = f"regulation_N{n}_{'refined' if refine else 'unrefined'}"
            log.write_csv(out / "logs" / f"{tag}.csv", out / "logs" / f"{tag}_timing.csv")
        return log

    reference = episode(cfg.reference_n, False) if cfg.reference_n else None
    table, logs = ResultsTable(), {}
    if reference is not None:
        logs[(cfg.reference_n, False)] = reference
    for n in cfg.n_values:
        for refine in cfg.modes():
            if refine and not 1 <= cfg.n_i < n:
                continue
            log = episode(n, refine)
            logs[(n, refine)] = log
            ref = reference if reference is not None and not reference.failed else None
            table.add(n, refine, _metrics_or_fail(log, ref), cfg.seed)
    if write:
        table.write(out / "regulation_results.csv", out / "regulation_timing.csv")
    return table, logs


def run_lemniscate(cfg: ExperimentConfig, write: bool = True) -> tuple[ResultsTable, dict]:
    """Track the figure-eight for one period (or ``duration``) in each mode."""
    params = cfg.vehicle()
    duration = LEMNISCATE_PERIOD if cfg.duration is None else cfg.duration
    out = Path(cfg.out_dir)
    table, logs = ResultsTable(), {}
    for refine in cfg.modes():
        ncfg = cfg.nmpc(refine=refine)
        log = run_closed_loop(TrackingTask(), ncfg, duration, params, cfg.seed, cfg.noise_std, cfg.n_fine)
        logs[refine] = log
        table.add(ncfg.n, refine, _metrics_or_fail(log, None), cfg.seed)
        if write:
            tag = f"lemniscate_{'refined' if refine else 'unrefined'}"
            log.write_csv(out / f"{tag}.csv", out / f"{tag}_timing.csv")
    if write:
        table.write(out / "lemniscate_metrics.csv", out / "lemniscate_timing.csv")
    return table, logs


SWEEP_COLUMNS = ["horizon", "N", "refined", "trajectories", "mean_ms", "p95_ms", "lm_iterations"]
PHASE_COLUMNS = ["horizon", "N", "refined", "jacobian", "linear_solve", "refinement", "other"]


def sweep_nodes(t_f: float, spacing: float) -> int:
    return max(3, math.ceil(t_f / spacing - 1e-9))


def run_runtime_sweep(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Mean and 95th percentile cycle time per horizon on the tracking task.

    Each horizon gets ``ceil(t_f / node_spacing)`` intervals and
    ``trajectories`` planned trajectories (control cycles). The phase
    breakdown splits the mean cycle into Jacobian, linear solve, refinement
    bookkeeping and everything else, as fractions.
    """
    params = cfg.vehicle()
    runs = []
    for t_f in sorted(cfg.horizons):
        n = sweep_nodes(t_f, cfg.node_spacing)
        for refine in cfg.modes():
            if refine and not 1 <= cfg.n_i < n:
                continue
            ncfg = cfg.nmpc(n=n, t_f=t_f, refine=refine)
            episode = closed_loop_episode(
                TrackingTask(), ncfg, cfg.trajectories * cfg.dt_ctrl, params, cfg.seed, cfg.noise_std, cfg.n_fine
            )
            runs.append([t_f, n, refine, episode, None])
    # one cycle per episode per round so load fluctuations hit every horizon alike
    active = list(runs)
    while active:
        for run in list(active):
            try:
                run[4] = next(run[3])
            except StopIteration:
                active.remove(run)

    rows, phases = [], []
    for t_f, n, refine, _, log in runs:
        solve = log.timing("solve_ms")
        jac, lin, ref = log.timing("jacobian_ms"), log.timing("linear_solve_ms"), log.timing("refine_ms")
        ok = np.isfinite(solve)
        mean = float(solve[ok].mean())
        rows.append([t_f, n, int(refine), int(ok.sum()), mean, float(np.percentile(solve[ok], 95)),
                     float(log.column("lm_iterations").mean())])
        total = solve[ok].sum()
        j, s, r_own = jac[ok].sum(), lin[ok].sum(), ref[ok].sum()
        other = max(total - j - s - r_own, 0.0)
        phases.append([t_f, n, int(refine), j / total, s / total, r_own / total, other / total])
    result = {"rows": rows, "phases": phases}
    if write:
        out = Path(cfg.out_dir)
        _write_csv(out / "runtime_sweep.csv", SWEEP_COLUMNS, rows)
        _write_csv(out / "runtime_phases.csv", PHASE_COLUMNS, phases)
    return result


def sweep_fit(rows, refined: bool = False) -> tuple[float, float, float]:
    """Least-squares line of mean cycle time against node count: (slope, intercept, R^2)."""
    sel = [(r[1], r[4]) for r in rows if r[2] == int(refined)]
    x, y = np.array(sel, dtype=float).T
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, icept])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), r2


def refinement_overhead(rows) -> dict:
    """Mean refined minus unrefined cycle time per horizon [ms]."""
    by = {(r[0], r[2]): r[4] for r in rows}
    return {h: by[(h, 1)] - by[(h, 0)] for (h, refd) in by if refd == 0 and (h, 1) in by}

"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_backends.py [--nodes 20] [--repeat 200] [--csv out.csv]

Times every kernel on the same inputs with both backends, checks that their
outputs agree, and reports the speed-up. A closed-loop cycle is timed too, by
running each backend in a fresh interpreter (the backend is fixed at import).
"""

from __future__ import annotations

import argparse
import csv
import os
import subprocess
import sys
import timeit

import numpy as np

from flatnmpc import _pykernels
from flatnmpc._kernels import get_backend
from flatnmpc.flat_model import VehicleParams
from flatnmpc.nmpc_runtime import lemniscate

CYCLE_SNIPPET = """
import time
from flatnmpc.nmpc_runtime import NmpcConfig, TrackingTask, run_closed_loop
cfg = NmpcConfig(t_f={t_f}, n={n})
run_closed_loop(TrackingTask(), cfg, 0.1)
log = run_closed_loop(TrackingTask(), cfg, {cycles} * cfg.dt_ctrl)
print(log.timing("solve_ms").mean())
"""


def kernel_inputs(n_nodes: int, params: VehicleParams):
    times = np.linspace(0.0, 0.2 * n_nodes, n_nodes + 1)
    Z = np.ascontiguousarray([lemniscate(t) for t in times])
    states, inputs, _ = _pykernels.recover(Z, params.vector)
    goals = np.zeros((Z.shape[0], 22))
    goals[:, :18] = states
    goals[:, 18] = params.hover_thrust
    dts = np.ascontiguousarray(np.diff(times))
    return Z, states, inputs, goals, dts


def kernel_cases(k, n_nodes: int, params: VehicleParams):
    Z, states, inputs, goals, dts = kernel_inputs(n_nodes, params)
    p = params.vector
    hi = Z.shape[0] - 1
    U = np.ascontiguousarray(np.repeat(inputs[:1], 8, axis=0))
    return {
        "recover": lambda: k.recover(Z, p),
        "step_coarse": lambda: k.step(states[:-1], inputs[:-1], dts, 1, p),
        "step_fine": lambda: k.step(states[:-1], inputs[:-1], dts, 10, p),
        "ocp_residuals": lambda: k.ocp_residuals(Z, dts, goals, p, 0, hi),
        "ocp_jacobian": lambda: k.ocp_jacobian(Z, dts, goals, p, 0, hi, 1e-6),
        "flat_from_state": lambda: k.flat_from_state(np.ascontiguousarray(states[0]), U, p),
    }


def _first_array(out):
    return out[0] if isinstance(out, tuple) else out


def time_cycle(backend: str, t_f: float, n: int, cycles: int) -> float:
    env = dict(os.environ, FLATNMPC_BACKEND=backend)
    code = CYCLE_SNIPPET.format(t_f=t_f, n=n, cycles=cycles)
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--cycles", type=int, default=100)
    parser.add_argument("--csv", help="also write the table here")
    args = parser.parse_args(argv)

    try:
        compiled = get_backend("cython")
    except ImportError:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`")
        return 1
    params = VehicleParams.firefly()
    py_cases = kernel_cases(_pykernels, args.nodes, params)
    c_cases = kernel_cases(compiled, args.nodes, params)

    rows = []
    for name in py_cases:
        diff = np.abs(_first_array(py_cases[name]()) - _first_array(c_cases[name]())).max()
        t_py = min(timeit.repeat(py_cases[name], number=args.repeat, repeat=3)) / args.repeat
        t_c = min(timeit.repeat(c_cases[name], number=args.repeat, repeat=3)) / args.repeat
        rows.append([name, 1e6 * t_py, 1e6 * t_c, t_py / t_c, float(diff)])

    t_f = 0.2 * args.nodes
    cyc_py = time_cycle("python", t_f, args.nodes, args.cycles)
    cyc_c = time_cycle("cython", t_f, args.nodes, args.cycles)
    rows.append([f"nmpc_cycle (N={args.nodes})", 1e3 * cyc_py, 1e3 * cyc_c, cyc_py / cyc_c, float("nan")])

    print(f"{'kernel':<22}{'python [us]':>13}{'cython [us]':>13}{'speed-up':>10}{'max diff':>11}")
    for name, a, b, s, d in rows:
        print(f"{name:<22}{a:>13.1f}{b:>13.1f}{s:>10.1f}{d:>11.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["kernel", "python_us", "cython_us", "speedup", "max_abs_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

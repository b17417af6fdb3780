"""Independent reference computations used by the tests.

None of these call the package kernels: recovery goes through finite
differences of the algebraic attitude map, integration through scipy's
adaptive integrator, and the cost through an explicit per-node loop.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.spatial.transform import Rotation

E_Z = np.array([0.0, 0.0, 1.0])


def taylor_flat(node):
    """Position and yaw polynomials (callables of time) matching a flat node's derivatives."""
    node = np.asarray(node, dtype=float)
    p, v, a, j, s = node[0:3], node[4:7], node[7:10], node[10:13], node[13:16]
    g0, g1, g2 = node[3], node[16], node[17]

    def pos(t):
        return p + v * t + a * t**2 / 2 + j * t**3 / 6 + s * t**4 / 24

    def acc(t):
        return a + j * t + s * t**2 / 2

    def yaw(t):
        return g0 + g1 * t + g2 * t**2 / 2

    return pos, acc, yaw


def attitude(acc, yaw, mass, gravity):
    """Thrust and rotation from acceleration and heading (body z along thrust)."""
    t = mass * (np.asarray(acc) + gravity * E_Z)
    F = np.linalg.norm(t)
    z = t / F
    xc = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    y = np.cross(z, xc)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return F, np.column_stack([x, y, z])


def _vee(S):
    return np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]]) / 2


def _d5(f, t, h):
    """Five-point central derivative."""
    return (f(t - 2 * h) - 8 * f(t - h) + 8 * f(t + h) - f(t + 2 * h)) / (12 * h)


def recover_fd(node, mass, gravity, inertia, h=1e-3):
    """State (p, v, R, omega) and input (F, tau) of a flat node by numerical differentiation."""
    _, acc, yaw = taylor_flat(node)
    inertia = np.asarray(inertia, dtype=float)

    def R_of(t):
        return attitude(acc(t), yaw(t), mass, gravity)[1]

    def omega_of(t):
        return _vee(R_of(t).T @ _d5(R_of, t, h))

    F, R = attitude(acc(0.0), yaw(0.0), mass, gravity)
    w = omega_of(0.0)
    dw = _d5(omega_of, 0.0, h)
    tau = inertia @ dw + np.cross(w, inertia @ w)
    node = np.asarray(node, dtype=float)
    return dict(p=node[0:3].copy(), v=node[4:7].copy(), R=R, omega=w, F=F, tau=tau)


def dynamics_ref(state, u, mass, gravity, inertia):
    """Rigid-body right-hand side: 18-vector state (p, v, R row-major, omega), input (F, tau)."""
    inertia = np.asarray(inertia, dtype=float)
    v = state[3:6]
    R = state[6:15].reshape(3, 3)
    w = state[15:18]
    W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    dv = -gravity * E_Z + R @ np.array([0.0, 0.0, u[0]]) / mass
    dR = R @ W
    dw = np.linalg.solve(inertia, np.asarray(u[1:4]) - np.cross(w, inertia @ w))
    return np.concatenate([v, dv, dR.ravel(), dw])


def integrate_ref(state, u, dt, mass, gravity, inertia, rtol=1e-12, atol=1e-13):
    """Exact flow over ``dt`` with the input held, via an adaptive high-order integrator."""
    sol = solve_ivp(
        lambda t, y: dynamics_ref(y, u, mass, gravity, inertia), (0.0, dt), np.asarray(state, dtype=float),
        method="DOP853", rtol=rtol, atol=atol,
    )
    return sol.y[:, -1]


def rk4_gs(state, u, dt, mass, gravity, inertia, substeps=1):
    """Fixed-step RK4 with Gram-Schmidt re-orthonormalization after every substep."""
    x = np.asarray(state, dtype=float).copy()
    h = dt / substeps
    f = lambda y: dynamics_ref(y, u, mass, gravity, inertia)
    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        R = x[6:15].reshape(3, 3)
        c0 = R[:, 0] / np.linalg.norm(R[:, 0])
        c1 = R[:, 1] - (c0 @ R[:, 1]) * c0
        c1 /= np.linalg.norm(c1)
        x[6:15] = np.column_stack([c0, c1, np.cross(c0, c1)]).ravel()
    return x


def state_minus(a, b):
    """(dp, dv, rotation vector of Rb^T Ra, dw)."""
    Ra, Rb = a[6:15].reshape(3, 3), b[6:15].reshape(3, 3)
    rot = Rotation.from_matrix(Rb.T @ Ra).as_rotvec()
    return np.concatenate([a[0:6] - b[0:6], rot, a[15:18] - b[15:18]])


def scalar_cost(nodes, times, goal_state, u_ref, Q, R_w, A_l, recover_fn, mass, gravity, inertia,
                active=None):
    """Cost 1/2 sum(nu'Q nu + phi'R phi + gamma'A gamma) by an explicit per-node loop.

    ``recover_fn(node) -> (state18, input4)``; ``goal_state`` is an 18-vector
    or a callable of the node index.
    """
    n = len(nodes)
    lo, hi = active if active is not None else (0, n - 1)
    total = 0.0
    for k in range(lo, hi + 1):
        x, u = recover_fn(nodes[k])
        g = goal_state(k) if callable(goal_state) else goal_state
        nu = state_minus(x, g)
        phi = u - u_ref
        total += nu @ Q @ nu + phi @ R_w @ phi
        if k < n - 1:
            x1, _ = recover_fn(nodes[k + 1])
            gam = state_minus(x1, rk4_gs(x, u, times[k + 1] - times[k], mass, gravity, inertia))
            total += gam @ A_l @ gam
    return 0.5 * total

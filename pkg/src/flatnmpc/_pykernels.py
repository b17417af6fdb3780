"""Vectorised numpy implementation of the hot kernels.

This is the fallback used when the compiled extension is unavailable. Every
function works on a batch of rows at once; the compiled module exposes the
same functions with the same signatures and return conventions.

Status convention: functions that can hit a flat singularity return the index
of the first offending row (or node), and ``-1`` when everything is regular.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _unpack(params):
    m, g, eps_f, eps_n = params[0], params[1], params[2], params[3]
    inertia = params[4:13].reshape(3, 3)
    inv_inertia = params[13:22].reshape(3, 3)
    return m, g, eps_f, eps_n, inertia, inv_inertia


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def recover(flat, params):
    """Map flat nodes to rigid-body states and inputs.

    Returns ``(states, inputs, status)``.
    """
    flat = np.atleast_2d(np.asarray(flat, dtype=float))
    m, g, eps_f, eps_n, inertia, _ = _unpack(params)
    nb = flat.shape[0]

    yaw = flat[:, 3]
    acc, jerk, snap = flat[:, 7:10], flat[:, 10:13], flat[:, 13:16]
    dyaw, ddyaw = flat[:, 16], flat[:, 17]

    thrust_vec = m * acc
    thrust_vec[:, 2] += m * g
    thrust = np.linalg.norm(thrust_vec, axis=1)
    bad = ~(thrust > eps_f)
    f_safe = np.where(bad, 1.0, thrust)
    z = thrust_vec / f_safe[:, None]

    c, s = np.cos(yaw), np.sin(yaw)
    zeros = np.zeros(nb)
    xc = np.stack([c, s, zeros], axis=1)
    yc = np.stack([-s, c, zeros], axis=1)
    u = np.cross(z, xc)
    n = np.linalg.norm(u, axis=1)
    bad |= ~(n > eps_n)
    n_safe = np.where(n > eps_n, n, 1.0)
    y = u / n_safe[:, None]
    x = np.cross(y, z)

    dthrust = m * _dot(z, jerk)
    wx = -m * _dot(y, jerk) / f_safe
    wy = m * _dot(x, jerk) / f_safe
    zxc, yyc, xyc, zyc = _dot(z, xc), _dot(y, yc), _dot(x, yc), _dot(z, yc)
    wz = (wx * zxc + dyaw * yyc) / n_safe

    dwx = wy * wz - (m * _dot(y, snap) + 2.0 * dthrust * wx) / f_safe
    dwy = (m * _dot(x, snap) - 2.0 * dthrust * wy) / f_safe - wx * wz
    dn = -wy * zxc + dyaw * xyc
    dwz = (
        dwx * zxc
        + wx * (wy * n_safe + dyaw * zyc)
        + ddyaw * yyc
        + dyaw * (-wz * xyc + wx * zyc)
        - wz * dn
    ) / n_safe

    omega = np.stack([wx, wy, wz], axis=1)
    domega = np.stack([dwx, dwy, dwz], axis=1)
    tau = domega @ inertia.T + np.cross(omega, omega @ inertia.T)

    rot = np.stack([x, y, z], axis=2)
    states = np.empty((nb, 18))
    states[:, 0:3] = flat[:, 0:3]
    states[:, 3:6] = flat[:, 4:7]
    states[:, 6:15] = rot.reshape(nb, 9)
    states[:, 15:18] = omega
    inputs = np.empty((nb, 4))
    inputs[:, 0] = thrust
    inputs[:, 1:4] = tau
    status = int(np.argmax(bad)) if bad.any() else -1
    return states, inputs, status


def _hat(w):
    nb = w.shape[0]
    out = np.zeros((nb, 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -w[:, 2], w[:, 1]
    out[:, 1, 0], out[:, 1, 2] = w[:, 2], -w[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -w[:, 1], w[:, 0]
    return out


def dynamics(states, inputs, params):
    m, g, _, _, inertia, inv_inertia = _unpack(params)
    nb = states.shape[0]
    rot = states[:, 6:15].reshape(nb, 3, 3)
    w = states[:, 15:18]
    out = np.empty_like(states)
    out[:, 0:3] = states[:, 3:6]
    out[:, 3:6] = rot[:, :, 2] * (inputs[:, 0] / m)[:, None]
    out[:, 5] -= g
    out[:, 6:15] = (rot @ _hat(w)).reshape(nb, 9)
    out[:, 15:18] = (inputs[:, 1:4] - np.cross(w, w @ inertia.T)) @ inv_inertia.T
    return out


def orthonormalize(states):
    """Gram-Schmidt on the rotation columns, in place."""
    nb = states.shape[0]
    rot = states[:, 6:15].reshape(nb, 3, 3)
    x = rot[:, :, 0]
    x = x / np.linalg.norm(x, axis=1)[:, None]
    y = rot[:, :, 1] - _dot(x, rot[:, :, 1])[:, None] * x
    y = y / np.linalg.norm(y, axis=1)[:, None]
    z = np.cross(x, y)
    states[:, 6:15] = np.stack([x, y, z], axis=2).reshape(nb, 9)
    return states


def step(states, inputs, dts, nsub, params):
    """``nsub`` RK4 substeps of length ``dt / nsub`` with zero-order-hold input."""
    x = np.array(np.atleast_2d(states), dtype=float)
    inputs = np.atleast_2d(inputs)
    h = (np.broadcast_to(np.asarray(dts, dtype=float), (x.shape[0],)) / nsub)[:, None]
    for _ in range(nsub):
        k1 = dynamics(x, inputs, params)
        k2 = dynamics(x + 0.5 * h * k1, inputs, params)
        k3 = dynamics(x + 0.5 * h * k2, inputs, params)
        k4 = dynamics(x + h * k3, inputs, params)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        orthonormalize(x)
    return x


def so3_log(rot):
    """Rotation vectors of a batch of (n, 3, 3) rotation matrices."""
    rot = np.asarray(rot, dtype=float)
    nb = rot.shape[0]
    vee = np.stack(
        [rot[:, 2, 1] - rot[:, 1, 2], rot[:, 0, 2] - rot[:, 2, 0], rot[:, 1, 0] - rot[:, 0, 1]],
        axis=1,
    )
    c = np.clip(0.5 * (np.trace(rot, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    theta = np.arccos(c)
    out = np.empty((nb, 3))

    small = theta < 1e-4
    near_pi = c < -0.9
    mid = ~small & ~near_pi
    out[small] = 0.5 * vee[small] * (1.0 + theta[small, None] ** 2 / 6.0)[:, :]
    out[mid] = (theta[mid] / (2.0 * np.sin(theta[mid])))[:, None] * vee[mid]
    for i in np.flatnonzero(near_pi):
        sym = 0.5 * (rot[i] + rot[i].T) - c[i] * np.eye(3)
        sym /= 1.0 - c[i]
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / np.sqrt(max(sym[k, k], 0.0))
        axis /= np.linalg.norm(axis)
        if axis @ vee[i] < 0.0:
            axis = -axis
        out[i] = theta[i] * axis
    return out


def state_diff(a, b):
    """``a ⊖ b`` for batches of states: (dp, dv, log(Rb^T Ra), dw)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    nb = a.shape[0]
    ra = a[:, 6:15].reshape(nb, 3, 3)
    rb = b[:, 6:15].reshape(-1, 3, 3)
    out = np.empty((nb, 12))
    out[:, 0:6] = a[:, 0:6] - b[:, 0:6]
    out[:, 6:9] = so3_log(np.swapaxes(rb, 1, 2) @ ra)
    out[:, 9:12] = a[:, 15:18] - b[:, 15:18]
    return out


def ocp_residuals(Z, dts, goals, params, lo, hi):
    """Raw residual rows ``[nu_k, phi_k, gamma_k]`` for nodes ``lo..hi``.

    The continuity slot of the last trajectory node is left at zero.
    """
    n = Z.shape[0]
    last = min(hi + 1, n - 1)
    states, inputs, status = recover(Z[lo : last + 1], params)
    n_act = hi - lo + 1
    out = np.zeros((n_act, 28))
    if status >= 0:
        return out, lo + status
    out[:, 0:12] = state_diff(states[:n_act], goals[lo : hi + 1, 0:18])
    out[:, 12:16] = inputs[:n_act] - goals[lo : hi + 1, 18:22]
    n_cont = min(hi, n - 2) - lo + 1
    if n_cont > 0:
        prop = step(states[:n_cont], inputs[:n_cont], dts[lo : lo + n_cont], 1, params)
        out[:n_cont, 16:28] = state_diff(states[1 : n_cont + 1], prop)
    return out, -1


def ocp_jacobian(Z, dts, goals, params, lo, hi, h):
    """Central-difference Jacobian blocks of :func:`ocp_residuals`.

    Returns ``(D, C, status)`` where ``D[k]`` is the derivative of row ``k``
    with respect to its own node and ``C[k]`` the derivative of its
    continuity part with respect to the next node (zero where that node is
    outside ``lo..hi``).
    """
    n = Z.shape[0]
    n_act = hi - lo + 1
    D = np.zeros((n_act, 28, 18))
    C = np.zeros((n_act, 12, 18))

    last = min(hi + 1, n - 1)
    states, inputs, status = recover(Z[lo : last + 1], params)
    if status >= 0:
        return D, C, lo + status
    n_cont = min(hi, n - 2) - lo + 1
    prop = step(states[:n_cont], inputs[:n_cont], dts[lo : lo + n_cont], 1, params)

    # perturbed copies: (node, coord, sign)
    base = Z[lo : hi + 1]
    pert = np.repeat(base[:, None, None, :], 18, axis=1).repeat(2, axis=2)
    idx = np.arange(18)
    pert[:, idx, 0, idx] += h
    pert[:, idx, 1, idx] -= h
    flat_p = pert.reshape(-1, 18)
    sp, up, status = recover(flat_p, params)
    if status >= 0:
        return D, C, lo + status // 36
    node_of = np.repeat(np.arange(n_act), 36)
    goal_p = goals[lo : hi + 1][node_of]

    nu = state_diff(sp, goal_p[:, 0:18]).reshape(n_act, 18, 2, 12)
    phi = (up - goal_p[:, 18:22]).reshape(n_act, 18, 2, 4)
    D[:, 0:12, :] = np.swapaxes(nu[:, :, 0] - nu[:, :, 1], 1, 2) / (2 * h)
    D[:, 12:16, :] = np.swapaxes(phi[:, :, 0] - phi[:, :, 1], 1, 2) / (2 * h)

    if n_cont > 0:
        rows = node_of < n_cont
        dt_p = dts[lo : lo + n_cont][node_of[rows]]
        prop_p = step(sp[rows], up[rows], dt_p, 1, params)
        nxt = states[1 : n_cont + 1][node_of[rows]]
        gam = state_diff(nxt, prop_p).reshape(n_cont, 18, 2, 12)
        D[:n_cont, 16:28, :] = np.swapaxes(gam[:, :, 0] - gam[:, :, 1], 1, 2) / (2 * h)

    # continuity of row k w.r.t. active node k+1
    n_c = min(n_cont, n_act - 1)
    if n_c > 0:
        rows = (node_of >= 1) & (node_of <= n_c)
        prev = prop[node_of[rows] - 1]
        gam = state_diff(sp[rows], prev).reshape(n_c, 18, 2, 12)
        C[:n_c] = np.swapaxes(gam[:, :, 0] - gam[:, :, 1], 1, 2) / (2 * h)
    return D, C, -1


def flat_from_state(st, inputs, params, dthrust=0.0, ddthrust=0.0):
    """Flat nodes of one state under a batch of inputs; status as in ``recover``."""
    m, g, eps_f, eps_n = params[0], params[1], params[2], params[3]
    inertia, inv = params[4:13].reshape(3, 3), params[13:22].reshape(3, 3)
    st = np.asarray(st, dtype=float)
    U = np.atleast_2d(np.asarray(inputs, dtype=float))
    out = np.zeros((U.shape[0], 18))
    R, w = st[6:15].reshape(3, 3), st[15:18]
    ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]
    if abs(ez[2]) < eps_n:
        return out, 0
    bad = np.flatnonzero(~(U[:, 0] > eps_f))
    if bad.size:
        return out, int(bad[0])
    F = U[:, 0:1]
    dz = w[1] * ex - w[0] * ey
    dw = (U[:, 1:4] - np.cross(w, inertia @ w)) @ inv.T
    ddz = (dw[:, 1:2] + w[0] * w[2]) * ex + (w[1] * w[2] - dw[:, 0:1]) * ey - (w[0] ** 2 + w[1] ** 2) * ez
    xc = (1.0 if ez[2] > 0 else -1.0) * np.array([ey[1], -ey[0], 0.0])
    xc /= np.linalg.norm(xc)
    yc = np.array([-xc[1], xc[0], 0.0])
    n = ex @ xc
    zxc, yyc, xyc, zyc = ez @ xc, ey @ yc, ex @ yc, ez @ yc
    dyaw = (w[2] * n - w[0] * zxc) / yyc
    dn = -w[1] * zxc + dyaw * xyc
    out[:, 0:3] = st[0:3]
    out[:, 3] = np.arctan2(xc[1], xc[0])
    out[:, 4:7] = st[3:6]
    out[:, 7:10] = F * ez / m
    out[:, 9] -= g
    out[:, 10:13] = (dthrust * ez + F * dz) / m
    out[:, 13:16] = (ddthrust * ez + 2.0 * dthrust * dz + F * ddz) / m
    out[:, 16] = dyaw
    out[:, 17] = (
        dw[:, 2] * n - dw[:, 0] * zxc - w[0] * (w[1] * n + dyaw * zyc)
        - dyaw * (-w[2] * xyc + w[0] * zyc) + w[2] * dn
    ) / yyc
    return out, -1

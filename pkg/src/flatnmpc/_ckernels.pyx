# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same API as ``flatnmpc._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, acos, fabs, atan2

cnp.import_array()

NAME = "cython"


cdef inline double dot3(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void cross3(const double* a, const double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void matvec3(const double* m, const double* v, double* out) noexcept nogil:
    out[0] = m[0] * v[0] + m[1] * v[1] + m[2] * v[2]
    out[1] = m[3] * v[0] + m[4] * v[1] + m[5] * v[2]
    out[2] = m[6] * v[0] + m[7] * v[1] + m[8] * v[2]


cdef int recover1(const double* fl, const double* prm, double* st, double* u) noexcept nogil:
    cdef double m = prm[0], g = prm[1], eps_f = prm[2], eps_n = prm[3]
    cdef const double* inertia = prm + 4
    cdef double t[3], z[3], xc[3], yc[3], uu[3], x[3], y[3], w[3], dw[3], iw[3], wiw[3], idw[3]
    cdef double thrust, n, dthrust, zxc, yyc, xyc, zyc, dn, cy, sy
    cdef const double* acc = fl + 7
    cdef const double* jerk = fl + 10
    cdef const double* snap = fl + 13
    cdef double dyaw = fl[16], ddyaw = fl[17]
    cdef int i

    t[0] = m * acc[0]
    t[1] = m * acc[1]
    t[2] = m * (acc[2] + g)
    thrust = sqrt(dot3(t, t))
    if not (thrust > eps_f):
        return 1
    for i in range(3):
        z[i] = t[i] / thrust
    cy = cos(fl[3])
    sy = sin(fl[3])
    xc[0] = cy
    xc[1] = sy
    xc[2] = 0.0
    yc[0] = -sy
    yc[1] = cy
    yc[2] = 0.0
    cross3(z, xc, uu)
    n = sqrt(dot3(uu, uu))
    if not (n > eps_n):
        return 1
    for i in range(3):
        y[i] = uu[i] / n
    cross3(y, z, x)

    dthrust = m * dot3(z, jerk)
    w[0] = -m * dot3(y, jerk) / thrust
    w[1] = m * dot3(x, jerk) / thrust
    zxc = dot3(z, xc)
    yyc = dot3(y, yc)
    xyc = dot3(x, yc)
    zyc = dot3(z, yc)
    w[2] = (w[0] * zxc + dyaw * yyc) / n

    dw[0] = w[1] * w[2] - (m * dot3(y, snap) + 2.0 * dthrust * w[0]) / thrust
    dw[1] = (m * dot3(x, snap) - 2.0 * dthrust * w[1]) / thrust - w[0] * w[2]
    dn = -w[1] * zxc + dyaw * xyc
    dw[2] = (dw[0] * zxc + w[0] * (w[1] * n + dyaw * zyc) + ddyaw * yyc
             + dyaw * (-w[2] * xyc + w[0] * zyc) - w[2] * dn) / n

    matvec3(inertia, w, iw)
    cross3(w, iw, wiw)
    matvec3(inertia, dw, idw)

    for i in range(3):
        st[i] = fl[i]
        st[3 + i] = fl[4 + i]
        st[6 + 3 * i] = x[i]
        st[7 + 3 * i] = y[i]
        st[8 + 3 * i] = z[i]
        st[15 + i] = w[i]
    u[0] = thrust
    for i in range(3):
        u[1 + i] = idw[i] + wiw[i]
    return 0


cdef inline void dyn1(const double* st, const double* u, const double* prm, double* out) noexcept nogil:
    cdef double m = prm[0], g = prm[1]
    cdef const double* inertia = prm + 4
    cdef const double* inv_inertia = prm + 13
    cdef const double* r = st + 6
    cdef const double* w = st + 15
    cdef double iw[3], wiw[3], rhs[3]
    cdef double f = u[0] / m
    cdef int i
    for i in range(3):
        out[i] = st[3 + i]
        out[3 + i] = r[3 * i + 2] * f
    out[5] -= g
    # R * hat(w)
    for i in range(3):
        out[6 + 3 * i] = r[3 * i + 1] * w[2] - r[3 * i + 2] * w[1]
        out[7 + 3 * i] = -r[3 * i] * w[2] + r[3 * i + 2] * w[0]
        out[8 + 3 * i] = r[3 * i] * w[1] - r[3 * i + 1] * w[0]
    matvec3(inertia, w, iw)
    cross3(w, iw, wiw)
    for i in range(3):
        rhs[i] = u[1 + i] - wiw[i]
    matvec3(inv_inertia, rhs, out + 15)


cdef inline void orthonormalize1(double* st) noexcept nogil:
    cdef double* r = st + 6
    cdef double x[3], y[3], z[3], nx, ny, d
    cdef int i
    for i in range(3):
        x[i] = r[3 * i]
        y[i] = r[3 * i + 1]
    nx = sqrt(dot3(x, x))
    for i in range(3):
        x[i] /= nx
    d = dot3(x, y)
    for i in range(3):
        y[i] -= d * x[i]
    ny = sqrt(dot3(y, y))
    for i in range(3):
        y[i] /= ny
    cross3(x, y, z)
    for i in range(3):
        r[3 * i] = x[i]
        r[3 * i + 1] = y[i]
        r[3 * i + 2] = z[i]


cdef void step1(const double* st, const double* u, double dt, int nsub,
                const double* prm, double* out) noexcept nogil:
    cdef double k1[18], k2[18], k3[18], k4[18], tmp[18]
    cdef double h = dt / nsub
    cdef int i, s
    for i in range(18):
        out[i] = st[i]
    for s in range(nsub):
        dyn1(out, u, prm, k1)
        for i in range(18):
            tmp[i] = out[i] + 0.5 * h * k1[i]
        dyn1(tmp, u, prm, k2)
        for i in range(18):
            tmp[i] = out[i] + 0.5 * h * k2[i]
        dyn1(tmp, u, prm, k3)
        for i in range(18):
            tmp[i] = out[i] + h * k3[i]
        dyn1(tmp, u, prm, k4)
        for i in range(18):
            out[i] = out[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        orthonormalize1(out)


cdef void log1(const double* r, double* out) noexcept nogil:
    cdef double vee[3], c, theta, k, sym[9], axis[3], nrm, best
    cdef int i, j, col
    vee[0] = r[7] - r[5]
    vee[1] = r[2] - r[6]
    vee[2] = r[3] - r[1]
    c = 0.5 * (r[0] + r[4] + r[8] - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    theta = acos(c)
    if theta < 1e-4:
        k = 0.5 * (1.0 + theta * theta / 6.0)
        for i in range(3):
            out[i] = k * vee[i]
    elif c >= -0.9:
        k = theta / (2.0 * sin(theta))
        for i in range(3):
            out[i] = k * vee[i]
    else:
        for i in range(3):
            for j in range(3):
                sym[3 * i + j] = 0.5 * (r[3 * i + j] + r[3 * j + i])
            sym[4 * i] -= c
        for i in range(9):
            sym[i] /= (1.0 - c)
        col = 0
        best = sym[0]
        for i in range(1, 3):
            if sym[4 * i] > best:
                best = sym[4 * i]
                col = i
        if best < 0.0:
            best = 0.0
        for i in range(3):
            axis[i] = sym[3 * i + col] / sqrt(best)
        nrm = sqrt(dot3(axis, axis))
        for i in range(3):
            axis[i] /= nrm
        if dot3(axis, vee) < 0.0:
            for i in range(3):
                axis[i] = -axis[i]
        for i in range(3):
            out[i] = theta * axis[i]


cdef void diff1(const double* a, const double* b, double* out) noexcept nogil:
    """a minus b: dp, dv, log(Rb^T Ra), dw."""
    cdef double rel[9]
    cdef const double* ra = a + 6
    cdef const double* rb = b + 6
    cdef int i, j
    for i in range(6):
        out[i] = a[i] - b[i]
    for i in range(3):
        for j in range(3):
            rel[3 * i + j] = rb[i] * ra[j] + rb[3 + i] * ra[3 + j] + rb[6 + i] * ra[6 + j]
    log1(rel, out + 6)
    for i in range(3):
        out[9 + i] = a[15 + i] - b[15 + i]


def recover(flat, double[::1] params):
    cdef double[:, ::1] fl = np.ascontiguousarray(np.atleast_2d(flat), dtype=np.float64)
    cdef Py_ssize_t nb = fl.shape[0], i
    states_arr = np.empty((nb, 18))
    inputs_arr = np.empty((nb, 4))
    cdef double[:, ::1] st = states_arr
    cdef double[:, ::1] u = inputs_arr
    cdef int status = -1
    with nogil:
        for i in range(nb):
            if recover1(&fl[i, 0], &params[0], &st[i, 0], &u[i, 0]) and status < 0:
                status = <int>i
    return states_arr, inputs_arr, status


def dynamics(states, inputs, double[::1] params):
    cdef double[:, ::1] st = np.ascontiguousarray(np.atleast_2d(states), dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(np.atleast_2d(inputs), dtype=np.float64)
    cdef Py_ssize_t nb = st.shape[0], i
    out_arr = np.empty((nb, 18))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(nb):
            dyn1(&st[i, 0], &u[i, 0], &params[0], &out[i, 0])
    return out_arr


def step(states, inputs, dts, int nsub, double[::1] params):
    cdef double[:, ::1] st = np.ascontiguousarray(np.atleast_2d(states), dtype=np.float64)
    cdef double[:, ::1] u = np.ascontiguousarray(np.atleast_2d(inputs), dtype=np.float64)
    cdef Py_ssize_t nb = st.shape[0], i
    cdef double[::1] dt = np.array(
        np.broadcast_to(np.asarray(dts, dtype=np.float64), (nb,)), order="C")
    out_arr = np.empty((nb, 18))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(nb):
            step1(&st[i, 0], &u[i, 0], dt[i], nsub, &params[0], &out[i, 0])
    return out_arr


def so3_log(rot):
    cdef double[:, :, ::1] r = np.ascontiguousarray(rot, dtype=np.float64)
    cdef Py_ssize_t nb = r.shape[0], i
    out_arr = np.empty((nb, 3))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(nb):
            log1(&r[i, 0, 0], &out[i, 0])
    return out_arr


def state_diff(a, b):
    cdef double[:, ::1] sa = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    cdef double[:, ::1] sb = np.array(
        np.broadcast_to(np.atleast_2d(b), (sa.shape[0], 18)), dtype=np.float64, order="C")
    cdef Py_ssize_t nb = sa.shape[0], i
    out_arr = np.empty((nb, 12))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(nb):
            diff1(&sa[i, 0], &sb[i, 0], &out[i, 0])
    return out_arr


cdef int node_rows(const double* zk, const double* znext_state, const double* goal,
                   double dt, int has_next, const double* prm,
                   double* row, double* st, double* u, double* prop) noexcept nogil:
    """Fill one residual row; ``st``, ``u``, ``prop`` receive the node's
    recovered state, input and one-step propagation."""
    cdef int i
    if recover1(zk, prm, st, u):
        return 1
    diff1(st, goal, row)
    for i in range(4):
        row[12 + i] = u[i] - goal[18 + i]
    if has_next:
        step1(st, u, dt, 1, prm, prop)
        diff1(znext_state, prop, row + 16)
    else:
        for i in range(12):
            row[16 + i] = 0.0
    return 0


def ocp_residuals(double[:, ::1] Z, double[::1] dts, double[:, ::1] goals,
                  double[::1] params, int lo, int hi):
    cdef int n = Z.shape[0], n_act = hi - lo + 1, k, last = min(hi + 1, n - 1)
    out_arr = np.zeros((n_act, 28))
    cdef double[:, ::1] out = out_arr
    states_arr = np.empty((last - lo + 1, 18))
    cdef double[:, ::1] st = states_arr
    cdef double u[4], prop[18], own[18]
    cdef int status = -1
    with nogil:
        for k in range(lo, last + 1):
            if recover1(&Z[k, 0], &params[0], &st[k - lo, 0], u):
                status = k
                break
        if status < 0:
            for k in range(lo, hi + 1):
                node_rows(&Z[k, 0], &st[k + 1 - lo, 0] if k < n - 1 else NULL,
                          &goals[k, 0], dts[k] if k < n - 1 else 0.0, k < n - 1,
                          &params[0], &out[k - lo, 0], own, u, prop)
    return out_arr, status


def ocp_jacobian(double[:, ::1] Z, double[::1] dts, double[:, ::1] goals,
                 double[::1] params, int lo, int hi, double h):
    cdef int n = Z.shape[0], n_act = hi - lo + 1, last = min(hi + 1, n - 1)
    cdef int k, c, i, has_next
    D_arr = np.zeros((n_act, 28, 18))
    C_arr = np.zeros((n_act, 12, 18))
    cdef double[:, :, ::1] D = D_arr
    cdef double[:, :, ::1] C = C_arr
    states_arr = np.empty((last - lo + 1, 18))
    props_arr = np.zeros((last - lo + 1, 18))
    cdef double[:, ::1] st = states_arr
    cdef double[:, ::1] props = props_arr
    cdef double u[4], zp[18], rp[28], rm[28], sp[18], sm[18], prop[18], gp[12], gm[12]
    cdef int status = -1
    cdef double inv2h = 0.5 / h
    with nogil:
        for k in range(lo, last + 1):
            if recover1(&Z[k, 0], &params[0], &st[k - lo, 0], u):
                status = k
                break
            if k < n - 1 and k <= hi:
                step1(&st[k - lo, 0], u, dts[k], 1, &params[0], &props[k - lo, 0])
        if status < 0:
            for k in range(lo, hi + 1):
                has_next = k < n - 1
                for i in range(18):
                    zp[i] = Z[k, i]
                for c in range(18):
                    zp[c] = Z[k, c] + h
                    if node_rows(zp, &st[k + 1 - lo, 0] if has_next else NULL, &goals[k, 0],
                                 dts[k] if has_next else 0.0, has_next, &params[0],
                                 rp, sp, u, prop):
                        status = k
                        break
                    if k > lo:
                        diff1(sp, &props[k - 1 - lo, 0], gp)
                    zp[c] = Z[k, c] - h
                    if node_rows(zp, &st[k + 1 - lo, 0] if has_next else NULL, &goals[k, 0],
                                 dts[k] if has_next else 0.0, has_next, &params[0],
                                 rm, sm, u, prop):
                        status = k
                        break
                    zp[c] = Z[k, c]
                    for i in range(28):
                        D[k - lo, i, c] = (rp[i] - rm[i]) * inv2h
                    if k > lo:
                        diff1(sm, &props[k - 1 - lo, 0], gm)
                        for i in range(12):
                            C[k - 1 - lo, i, c] = (gp[i] - gm[i]) * inv2h
                if status >= 0:
                    break
    return D_arr, C_arr, status


def flat_from_state(double[::1] st, inputs, double[::1] params, double dthrust=0.0, double ddthrust=0.0):
    """Flat nodes of one state under a batch of inputs; status as in ``recover``."""
    cdef double[:, ::1] U = np.array(np.atleast_2d(inputs), dtype=float, order="C")
    cdef Py_ssize_t k, nk = U.shape[0]
    out_arr = np.zeros((nk, 18))
    cdef double[:, ::1] out = out_arr
    cdef const double* prm = &params[0]
    cdef double m = prm[0], g = prm[1], eps_f = prm[2], eps_n = prm[3]
    cdef const double* inertia = prm + 4
    cdef const double* inv = prm + 13
    cdef double ex[3], ey[3], ez[3], w[3], iw[3], gyro[3], dz[3], xc[3], yc[3], r[3], dw[3], ddz[3]
    cdef double nrm, sgn, yaw, n, zxc, yyc, xyc, zyc, dyaw, dn, F
    cdef int i
    for i in range(3):
        ex[i] = st[6 + 3 * i]
        ey[i] = st[7 + 3 * i]
        ez[i] = st[8 + 3 * i]
        w[i] = st[15 + i]
    if fabs(ez[2]) < eps_n:
        return out_arr, 0
    matvec3(inertia, w, iw)
    cross3(w, iw, gyro)
    for i in range(3):
        dz[i] = w[1] * ex[i] - w[0] * ey[i]
    sgn = 1.0 if ez[2] > 0 else -1.0
    xc[0] = sgn * ey[1]
    xc[1] = -sgn * ey[0]
    xc[2] = 0.0
    nrm = sqrt(xc[0] * xc[0] + xc[1] * xc[1])
    xc[0] /= nrm
    xc[1] /= nrm
    yaw = atan2(xc[1], xc[0])
    yc[0] = -xc[1]
    yc[1] = xc[0]
    yc[2] = 0.0
    n = dot3(ex, xc)
    zxc = dot3(ez, xc)
    yyc = dot3(ey, yc)
    xyc = dot3(ex, yc)
    zyc = dot3(ez, yc)
    dyaw = (w[2] * n - w[0] * zxc) / yyc
    dn = -w[1] * zxc + dyaw * xyc
    with nogil:
        for k in range(nk):
            F = U[k, 0]
            if not (F > eps_f):
                with gil:
                    return out_arr, k
            for i in range(3):
                r[i] = U[k, 1 + i] - gyro[i]
            matvec3(inv, r, dw)
            for i in range(3):
                ddz[i] = (dw[1] + w[0] * w[2]) * ex[i] + (w[1] * w[2] - dw[0]) * ey[i] - (w[0] * w[0] + w[1] * w[1]) * ez[i]
                out[k, i] = st[i]
                out[k, 4 + i] = st[3 + i]
                out[k, 7 + i] = F * ez[i] / m
                out[k, 10 + i] = (dthrust * ez[i] + F * dz[i]) / m
                out[k, 13 + i] = (ddthrust * ez[i] + 2.0 * dthrust * dz[i] + F * ddz[i]) / m
            out[k, 9] -= g
            out[k, 3] = yaw
            out[k, 16] = dyaw
            out[k, 17] = (
                dw[2] * n - dw[0] * zxc - w[0] * (w[1] * n + dyaw * zyc)
                - dyaw * (-w[2] * xyc + w[0] * zyc) + w[2] * dn
            ) / yyc
    return out_arr, -1

"""Cubic Hermite interpolation between two flat nodes."""

from __future__ import annotations

import numpy as np

from flatnmpc import layout
from flatnmpc.flat_model import FlatState, wrap_angle

_POS = [0, 1, 2, 3]  # position and yaw
_RATE = [4, 5, 6, 16]  # their first derivatives, same order
_LINEAR = list(range(7, 16)) + [17]


def hermite_basis(t: float):
    """Basis values and their derivatives in the unit parameter."""
    t2, t3 = t * t, t * t * t
    h = (2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, 3 * t2 - 2 * t3, t3 - t2)
    dh = (6 * t2 - 6 * t, 3 * t2 - 4 * t + 1, 6 * t - 6 * t2, 3 * t2 - 2 * t)
    return h, dh


def hermite_array(zi, zj, dt: float, t: float):
    """Array version of :func:`hermite_interpolate`."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    zi = np.asarray(zi, dtype=float)
    zj = np.array(zj, dtype=float)
    zj[layout.YAW] = zi[layout.YAW] + wrap_angle(zj[layout.YAW] - zi[layout.YAW])
    if t == 0.0:
        return zi.copy()
    if t == 1.0:
        out = zj.copy()
        out[layout.YAW] = wrap_angle(out[layout.YAW])
        return out

    (h00, h10, h01, h11), (d00, d10, d01, d11) = hermite_basis(t)
    vi, vj = zi[_POS], zj[_POS]
    mi, mj = dt * zi[_RATE], dt * zj[_RATE]
    out = np.empty(layout.FLAT_DIM)
    out[_POS] = h00 * vi + h10 * mi + h01 * vj + h11 * mj
    out[_RATE] = (d00 * vi + d10 * mi + d01 * vj + d11 * mj) / dt
    out[_LINEAR] = (1.0 - t) * zi[_LINEAR] + t * zj[_LINEAR]
    out[layout.YAW] = wrap_angle(out[layout.YAW])
    return out


def hermite_interpolate(zi, zj, dt_ij: float, t: float):
    """Flat node at unit parameter ``t`` between adjacent nodes ``zi`` and ``zj``.

    Position and yaw follow the cubic Hermite polynomial with tangents scaled
    by the interval length, their rates its derivative. Acceleration, jerk,
    snap and yaw acceleration are interpolated linearly, which keeps the
    endpoints exact and reproduces cubic trajectories.
    """
    arr_in = not isinstance(zi, FlatState)
    a = zi.to_array() if isinstance(zi, FlatState) else zi
    b = zj.to_array() if isinstance(zj, FlatState) else zj
    out = hermite_array(a, b, dt_ij, t)
    return out if arr_in else FlatState.from_array(out)

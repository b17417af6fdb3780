from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flatnmpc import _kernels, _pykernels
from flatnmpc.flat_model import VehicleParams
from flatnmpc.nmpc_runtime import lemniscate

try:
    _ck = _kernels.get_backend("cython")
except ImportError:
    _ck = None

needs_compiled = pytest.mark.skipif(_ck is None, reason="compiled kernels not built")
PARAMS = VehicleParams.firefly()
P = PARAMS.vector


def flat_batch(seed, n):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0, 20, n))
    Z = np.array([lemniscate(t) for t in times]) + 0.05 * rng.normal(size=(n, 18))
    return np.ascontiguousarray(Z)


def random_states(seed, n):
    rng = np.random.default_rng(seed)
    states, inputs, _ = _pykernels.recover(flat_batch(seed, n), P)
    inputs = inputs + rng.normal(0, [1.0, 0.05, 0.05, 0.05], size=inputs.shape)
    return np.ascontiguousarray(states), np.ascontiguousarray(inputs), np.ascontiguousarray(rng.uniform(0.01, 0.3, n))


def test_fallback_always_available():
    assert _kernels.get_backend("python") is _pykernels
    assert _kernels.BACKEND in ("python", "cython")


def test_env_var_forces_fallback():
    env = dict(os.environ, FLATNMPC_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "from flatnmpc._kernels import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_is_default():
    env = {k: v for k, v in os.environ.items() if k != "FLATNMPC_BACKEND"}
    out = subprocess.run([sys.executable, "-c", "from flatnmpc._kernels import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"


@needs_compiled
class TestAgreement:
    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_recover(self, seed, n):
        Z = flat_batch(seed, n)
        a, b = _pykernels.recover(Z, P), _ck.recover(Z, P)
        assert a[2] == b[2]
        assert np.allclose(a[0], b[0], rtol=1e-12, atol=1e-12) and np.allclose(a[1], b[1], rtol=1e-12, atol=1e-10)

    @given(st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([1, 10]))
    def test_step(self, seed, n, nsub):
        x, u, dts = random_states(seed, n)
        assert np.allclose(_pykernels.step(x, u, dts, nsub, P), _ck.step(x, u, dts, nsub, P), rtol=1e-12, atol=1e-12)

    @given(st.integers(0, 10_000), st.integers(2, 8))
    def test_ocp_kernels(self, seed, n):
        Z = flat_batch(seed, n)
        rng = np.random.default_rng(seed)
        dts = np.ascontiguousarray(rng.uniform(0.05, 0.3, n - 1))
        states, _, _ = _pykernels.recover(flat_batch(seed + 1, n), P)
        goals = np.zeros((n, 22))
        goals[:, :18] = states
        goals[:, 18] = PARAMS.hover_thrust
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        ra, sa = _pykernels.ocp_residuals(Z, dts, goals, P, lo, hi)
        rb, sb = _ck.ocp_residuals(Z, dts, goals, P, lo, hi)
        assert sa == sb and np.allclose(ra, rb, rtol=1e-11, atol=1e-11)
        Da, Ca, sa = _pykernels.ocp_jacobian(Z, dts, goals, P, lo, hi, 1e-6)
        Db, Cb, sb = _ck.ocp_jacobian(Z, dts, goals, P, lo, hi, 1e-6)
        assert sa == sb
        # finite differences amplify the round-off gap by 1/h
        assert np.allclose(Da, Db, rtol=1e-6, atol=1e-6) and np.allclose(Ca, Cb, rtol=1e-6, atol=1e-6)

    @given(st.integers(0, 10_000), st.floats(-2.0, 2.0), st.floats(-5.0, 5.0))
    def test_flat_from_state(self, seed, dthrust, ddthrust):
        x, u, _ = random_states(seed, 6)
        a = _pykernels.flat_from_state(x[0].copy(), u, P, dthrust, ddthrust)
        b = _ck.flat_from_state(x[0].copy(), u, P, dthrust, ddthrust)
        assert a[1] == b[1] and np.allclose(a[0], b[0], rtol=1e-11, atol=1e-11)

    def test_singular_status_agrees(self):
        Z = flat_batch(0, 4)
        Z[2, 7:10] = (0.0, 0.0, -PARAMS.gravity)
        assert _pykernels.recover(Z, P)[2] == _ck.recover(Z, P)[2] == 2

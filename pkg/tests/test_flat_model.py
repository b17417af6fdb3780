from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from flatnmpc import layout
from flatnmpc.errors import SingularFlatState
from flatnmpc.flat_model import (
    ControlInput,
    FlatState,
    RigidBodyState,
    VehicleParams,
    euler_zyx,
    flat_error_terms,
    flat_from_state,
    recover,
    recover_input,
    recover_state,
    rot_z,
    wrap_angle,
)
from flatnmpc.rigid_body import step_coarse

PARAMS = VehicleParams.firefly()

small = st.floats(-2.0, 2.0, allow_nan=False)
vec3 = st.tuples(small, small, small)


def flat_nodes():
    """Flat nodes away from free fall: vertical acceleration above -g/2."""
    return st.builds(
        lambda p, yaw, v, a, j, s, dy, ddy: FlatState(
            p=p, gamma=yaw, d1=v, d2=(a[0], a[1], max(a[2], -4.0)), d3=j, d4=s, dgamma1=dy, dgamma2=ddy
        ),
        vec3, st.floats(-np.pi, np.pi), vec3, vec3, vec3, vec3, small, small,
    )


class TestTypes:
    def test_gamma_wrapped(self):
        assert FlatState(p=np.zeros(3), gamma=3.0 + 0.5).gamma == pytest.approx(3.5 - 2 * np.pi)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            FlatState(p=[np.nan, 0, 0])

    def test_negative_thrust_rejected(self):
        with pytest.raises(ValueError):
            ControlInput(-1.0)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            VehicleParams(mass=0.0, inertia=np.eye(3))
        with pytest.raises(ValueError):
            VehicleParams(mass=1.0, inertia=np.diag([1.0, -1.0, 1.0]))

    def test_array_round_trip(self):
        a = np.arange(18, dtype=float) / 10
        assert np.array_equal(FlatState.from_array(a).to_array(), a)


class TestRecoverState:
    def test_hover(self, unit_params):
        x = recover_state(FlatState(p=[1, 2, 3], d1=[0.5, 0, 0]), unit_params)
        assert np.allclose(x.R, np.eye(3), atol=1e-15)
        assert np.allclose(x.v, [0.5, 0, 0]) and np.allclose(x.omega, 0)

    def test_pure_yaw(self, unit_params):
        x = recover_state(FlatState(p=np.zeros(3), gamma=np.pi / 4, dgamma1=0.1), unit_params)
        assert np.allclose(x.R, rot_z(np.pi / 4), atol=1e-15)
        assert np.allclose(x.omega, [0, 0, 0.1], atol=1e-15)

    def test_accelerating_matches_fd_oracle(self, unit_params):
        node = FlatState(p=np.zeros(3), d2=[1, 0, 0], d3=[0.3, -0.2, 0.1], d4=[0.1, 0.2, -0.3],
                         dgamma1=0.2, dgamma2=-0.1)
        x, u = recover(node, unit_params)
        z = np.array([1, 0, 9.81]) / np.hypot(1, 9.81)
        assert np.allclose(x.R[:, 2], z, atol=1e-15)
        ref = oracles.recover_fd(node.to_array(), 1.0, 9.81, unit_params.inertia)
        assert np.allclose(x.R, ref["R"], atol=1e-14)
        assert np.allclose(x.omega, ref["omega"], atol=1e-9)
        assert np.allclose(u.tau, ref["tau"], atol=1e-8)

    @given(flat_nodes())
    def test_generic_matches_fd_oracle(self, node):
        x, u = recover(node, PARAMS)
        ref = oracles.recover_fd(node.to_array(), PARAMS.mass, PARAMS.gravity, PARAMS.inertia)
        assert np.allclose(x.R, ref["R"], atol=1e-12)
        assert np.allclose(x.omega, ref["omega"], atol=1e-7)
        assert u.thrust == pytest.approx(ref["F"], rel=1e-12)
        assert np.allclose(u.tau, ref["tau"], atol=1e-6)

    @given(flat_nodes())
    def test_rotation_in_so3(self, node):
        assert recover_state(node, PARAMS).check_rotation(1e-9)

    def test_free_fall_is_singular(self, params):
        with pytest.raises(SingularFlatState):
            recover_state(FlatState(p=np.zeros(3), d2=[0, 0, -params.gravity]), params)


class TestRecoverInput:
    def test_hover(self, unit_params):
        u = recover_input(FlatState(p=np.zeros(3)), unit_params)
        assert u.thrust == pytest.approx(9.81)
        assert np.allclose(u.tau, 0)

    def test_yaw_acceleration(self, unit_params):
        u = recover_input(FlatState(p=np.zeros(3), dgamma2=0.2), unit_params)
        assert np.allclose(u.tau, [0, 0, 0.004], atol=1e-15)

    @given(flat_nodes(), st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
    def test_thrust_invariant_under_yaw(self, node, a, b):
        na, nb = node.to_array(), node.to_array()
        na[layout.YAW], nb[layout.YAW] = a, b
        assert recover_input(na, PARAMS).thrust == pytest.approx(recover_input(nb, PARAMS).thrust, rel=1e-14)

    def test_round_trip_short_horizon(self, params):
        # polynomial trajectory, 0.1 s at 1 kHz, recovered inputs held per step
        rng = np.random.default_rng(4)
        cp = rng.uniform(-0.5, 0.5, (6, 3))
        cy = rng.uniform(-0.5, 0.5, 4)
        from flatnmpc.checks import polynomial_flat

        dt, n = 1e-3, 100
        nodes = [polynomial_flat(cp, cy, k * dt) for k in range(n + 1)]
        x = recover_state(nodes[0], params)
        for k in range(n):
            x = step_coarse(x, recover_input(nodes[k], params), dt, params)
        assert np.linalg.norm(x.p - nodes[-1][layout.P]) < 1e-4


class TestOmegaConsistency:
    @given(st.integers(0, 10_000))
    def test_rdot_matches_r_omega_hat(self, seed):
        rng = np.random.default_rng(seed)
        node = rng.normal(size=18) * 0.5
        node[layout.YAW] = rng.uniform(-np.pi, np.pi)
        pos, acc, yaw = oracles.taylor_flat(node)
        h = 1e-5

        def R_at(t):
            f = node.copy()
            f[layout.ACC] = acc(t)
            f[layout.YAW] = yaw(t)
            return recover_state(f, PARAMS).R

        x = recover_state(node, PARAMS)
        w = x.omega
        W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        Rdot = (R_at(h) - R_at(-h)) / (2 * h)
        assert np.abs(Rdot - x.R @ W).max() < 1e-4


class TestFlatFromState:
    @given(flat_nodes())
    def test_inverse_of_recover(self, node):
        x, u = recover(node, PARAMS)
        z = node.to_array()
        dthrust = PARAMS.mass * (x.R[:, 2] @ z[layout.JERK])
        back = flat_from_state(x, u, PARAMS, dthrust, 0.0)
        x2, u2 = recover(back, PARAMS)
        assert np.allclose(x2.to_array(), x.to_array(), atol=1e-9)
        assert np.allclose(u2.to_array(), u.to_array(), atol=1e-8)

    def test_zero_thrust_singular(self, params):
        with pytest.raises(SingularFlatState):
            flat_from_state(RigidBodyState.hover(np.zeros(3)), ControlInput(0.0), params)


class TestFlatErrorTerms:
    def test_equilibrium(self, params):
        goal = RigidBodyState.hover([1, 2, 3], 0.3)
        node = FlatState(p=[1, 2, 3], gamma=0.3)
        nu, phi, gamma = flat_error_terms(node, node, goal, params, 0.37)
        assert np.allclose(nu, 0, atol=1e-15) and np.allclose(gamma, 0, atol=1e-14)
        assert np.allclose(phi, [params.hover_thrust, 0, 0, 0])

    def test_displaced_next_node(self, params):
        goal = RigidBodyState.hover(np.zeros(3))
        nu, _, gamma = flat_error_terms(FlatState(p=np.zeros(3)), FlatState(p=[0.1, 0, 0]), goal, params, 0.1)
        assert np.allclose(gamma[0:3], [0.1, 0, 0], atol=1e-14)
        assert np.allclose(gamma[3:], 0, atol=1e-14)

    def test_generic_pair_matches_oracle(self, params):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=18) * 0.4, rng.normal(size=18) * 0.4
        goal = RigidBodyState(rng.normal(size=3), rng.normal(size=3), rot_z(0.4), rng.normal(size=3) * 0.1)
        nu, phi, gamma = flat_error_terms(a, b, goal, params, 0.1)
        m, g, I = params.mass, params.gravity, params.inertia

        def state(node):
            r = oracles.recover_fd(node, m, g, I)
            return np.concatenate([r["p"], r["v"], r["R"].ravel(), r["omega"]]), np.concatenate([[r["F"]], r["tau"]])

        xa, ua = state(a)
        xb, _ = state(b)
        assert np.allclose(nu, oracles.state_minus(xa, goal.to_array()), atol=1e-7)
        assert np.allclose(phi, ua, atol=1e-6)
        ref_gamma = oracles.state_minus(xb, oracles.rk4_gs(xa, ua, 0.1, m, g, I))
        assert np.allclose(gamma, ref_gamma, atol=1e-6)


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 4001)
    w = wrap_angle(a)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.sin(w), np.sin(a)) and np.allclose(np.cos(w), np.cos(a))
    assert wrap_angle(np.pi) == pytest.approx(np.pi)


def test_euler_zyx_of_yaw_rotation():
    roll, pitch, yaw = euler_zyx(rot_z(0.7))
    assert (roll, pitch) == pytest.approx((0.0, 0.0)) and yaw == pytest.approx(0.7)

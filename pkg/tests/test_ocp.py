from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from flatnmpc import layout
from flatnmpc.errors import SingularFlatState
from flatnmpc.flat_model import RigidBodyState, VehicleParams, recover
from flatnmpc.ls_solver import numerical_jacobian
from flatnmpc.nmpc_runtime import lemniscate
from flatnmpc.ocp import (
    BLOCK_DENSE_LIMIT,
    BlockNormalEquations,
    FlatTrajectory,
    OcpLeastSquares,
    OcpProblem,
    OcpWeights,
    TimeMesh,
    initial_guess,
    total_cost,
    transcribe,
    warm_start,
)

PARAMS = VehicleParams.firefly()
HOVER_U = np.array([PARAMS.hover_thrust, 0.0, 0.0, 0.0])


def oracle_recover(node):
    r = oracles.recover_fd(node, PARAMS.mass, PARAMS.gravity, PARAMS.inertia)
    x = np.concatenate([r["p"], r["v"], r["R"].ravel(), r["omega"]])
    return x, np.concatenate([[r["F"]], r["tau"]])


def random_nodes(rng, n, scale=0.3):
    nodes = np.array([lemniscate(t) for t in np.linspace(0.0, 2.0, n)])
    return nodes + scale * rng.normal(size=nodes.shape) * 0.1


def tracking_problem(n=6, t_f=1.0, t0=0.0, x0=None):
    return OcpProblem(TimeMesh.uniform(t_f, n), PARAMS, reference=lemniscate, t0=t0, x0=x0, u_ref=HOVER_U)


class TestTimeMesh:
    def test_uniform(self):
        m = TimeMesh.uniform(2.0, 4)
        assert np.allclose(m.times, [0, 0.5, 1, 1.5, 2]) and m.n_intervals == 4 and m.n_nodes == 5
        assert m.t_f == 2.0 and np.allclose(m.dts, 0.5)

    @pytest.mark.parametrize("times", [[0.0, 1.0], [0.0, 1.0, 1.0], [0.1, 0.5, 1.0], [0.0, 2.0, 1.0]])
    def test_invalid(self, times):
        with pytest.raises(ValueError):
            TimeMesh(times)

    def test_insert(self):
        m, k = TimeMesh.uniform(1.0, 2).insert(0.25)
        assert k == 1 and np.allclose(m.times, [0, 0.25, 0.5, 1.0])
        for bad in (0.5, 0.0, 1.0, 2.0):
            with pytest.raises(ValueError):
                TimeMesh.uniform(1.0, 2).insert(bad)


class TestProblemSetup:
    def test_node_count_checked(self):
        with pytest.raises(ValueError):
            FlatTrajectory(TimeMesh.uniform(1.0, 3), np.zeros((3, 18)))

    def test_goal_xor_reference(self):
        mesh = TimeMesh.uniform(1.0, 3)
        with pytest.raises(ValueError):
            OcpProblem(mesh, PARAMS)
        with pytest.raises(ValueError):
            OcpProblem(mesh, PARAMS, goal=RigidBodyState.hover(np.zeros(3)), reference=lemniscate)

    @pytest.mark.parametrize("kw", [dict(Q=-1.0), dict(R_w=0.0), dict(A_l=np.zeros(12)), dict(Q=np.eye(3))])
    def test_bad_weights(self, kw):
        base = dict(Q=1.0, R_w=1.0, A_l=1.0)
        base.update(kw)
        with pytest.raises(ValueError):
            OcpWeights(**base)

    def test_whitener(self):
        w = OcpWeights.default()
        W = w.whitener
        assert np.allclose(W.T @ W, np.block([
            [w.Q, np.zeros((12, 16))],
            [np.zeros((4, 12)), w.R_w, np.zeros((4, 12))],
            [np.zeros((12, 16)), w.A_l],
        ]))


class TestTranscription:
    def test_hover_at_goal_is_zero(self):
        goal = RigidBodyState.hover([1.0, -2.0, 3.0], 0.7)
        problem = OcpProblem(TimeMesh.uniform(1.0, 4), PARAMS, goal=goal, u_ref=HOVER_U)
        blocks = transcribe(problem, initial_guess(problem))
        assert len(blocks) == 3 * 5 - 1
        assert max(np.abs(b.r).max() for b in blocks) < 1e-12
        assert total_cost(problem, initial_guess(problem)) < 1e-20

    def test_block_kinds(self):
        problem = tracking_problem(n=3)
        kinds = [(b.kind, b.nodes) for b in transcribe(problem, initial_guess(problem))]
        assert kinds[:3] == [("state", (0,)), ("input", (0,)), ("continuity", (0, 1))]
        assert kinds[-2:] == [("state", (3,)), ("input", (3,))]

    @given(st.integers(0, 10_000))
    def test_cost_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        mesh = TimeMesh(np.concatenate([[0.0], np.cumsum(rng.uniform(0.05, 0.4, n))]))
        problem = OcpProblem(mesh, PARAMS, reference=lemniscate, t0=float(rng.uniform(0, 10)), u_ref=HOVER_U)
        traj = FlatTrajectory(mesh, random_nodes(rng, n + 1))
        lo = int(rng.integers(0, n + 1))
        hi = int(rng.integers(lo, n + 1))
        goals = problem.goal_array(mesh.times)
        w = problem.weights
        ref = oracles.scalar_cost(
            traj.nodes, mesh.times, lambda k: goals[k, :18], HOVER_U, w.Q, w.R_w, w.A_l, oracle_recover,
            PARAMS.mass, PARAMS.gravity, PARAMS.inertia, active=(lo, hi),
        )
        got = total_cost(problem, traj, (lo, hi))
        assert got == pytest.approx(ref, rel=1e-7, abs=1e-9)
        ls = OcpLeastSquares(problem, traj, (lo, hi))
        assert ls.cost(ls.initial()) == pytest.approx(got, rel=1e-12, abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_frozen_nodes_do_not_enter(self, seed):
        rng = np.random.default_rng(seed)
        problem = tracking_problem(n=7)
        traj = FlatTrajectory(problem.mesh, random_nodes(rng, 8))
        lo = int(rng.integers(0, 7))
        hi = int(rng.integers(lo, 7))
        before = total_cost(problem, traj, (lo, hi))
        other = traj.copy()
        # node hi + 1 is the target of the last continuity residual
        frozen = [k for k in range(8) if k < lo or k > hi + 1]
        other.nodes[frozen] += rng.normal(size=(len(frozen), 18))
        assert total_cost(problem, other, (lo, hi)) == before
        ls = OcpLeastSquares(problem, traj, (lo, hi))
        z = ls.initial() + rng.normal(size=ls.n_vars)
        assert np.array_equal(ls.expand(z)[frozen], traj.nodes[frozen])

    def test_singular_node_raises(self):
        problem = tracking_problem(n=3)
        traj = initial_guess(problem)
        traj.nodes[1, layout.ACC] = (0.0, 0.0, -PARAMS.gravity)
        with pytest.raises(SingularFlatState):
            transcribe(problem, traj)


class TestGuesses:
    def test_regulation_line(self):
        x0 = RigidBodyState.hover(np.zeros(3))
        goal = RigidBodyState.hover([2.0, 2.0, 1.0], 1.0)
        problem = OcpProblem(TimeMesh.uniform(2.0, 5), PARAMS, goal=goal, x0=x0)
        nodes = initial_guess(problem).nodes
        assert np.allclose(nodes[:, layout.P], np.outer(np.linspace(0, 1, 6), [2.0, 2.0, 1.0]))
        assert np.allclose(nodes[:, layout.YAW], np.linspace(0, 1, 6))
        assert np.allclose(nodes[:, layout.VEL], [1.0, 1.0, 0.5])
        assert np.all(nodes[:, layout.ACC] == 0)

    def test_lemniscate_samples(self):
        nodes = initial_guess(tracking_problem(n=5)).nodes
        assert np.allclose(nodes[0, layout.P], [0.0, 0.0, np.sin(5.0) / 3])
        assert nodes[0, layout.YAW] == 0.0

    def test_warm_start_zero_shift_is_identity(self):
        traj = FlatTrajectory(TimeMesh.uniform(1.0, 4), random_nodes(np.random.default_rng(0), 5))
        assert np.allclose(warm_start(traj, 0.0).nodes, traj.nodes, atol=1e-14)

    def test_warm_start_shift_by_one_interval(self):
        traj = FlatTrajectory(TimeMesh.uniform(1.0, 4), random_nodes(np.random.default_rng(1), 5))
        out = warm_start(traj, 0.25).nodes
        assert np.allclose(out[:-1], traj.nodes[1:], atol=1e-12)
        assert np.array_equal(out[-1], traj.nodes[-1])

    @pytest.mark.parametrize("shift", [-0.1, 1.0, 2.0])
    def test_warm_start_shift_range(self, shift):
        with pytest.raises(ValueError):
            warm_start(initial_guess(tracking_problem(n=4)), shift)


class TestLeastSquares:
    @given(st.integers(0, 10_000))
    def test_pinned_node_reproduces_measured_state(self, seed):
        rng = np.random.default_rng(seed)
        x0, _ = recover(lemniscate(0.3), PARAMS)
        problem = tracking_problem(n=4, x0=x0)
        ls = OcpLeastSquares(problem, initial_guess(problem))
        assert ls.n_vars == 4 + 18 * 4
        z = ls.initial()
        z[0:4] += 0.1 * rng.normal(size=4)
        x, u = recover(ls.expand(z)[0], PARAMS)
        assert np.allclose(x.to_array(), x0.to_array(), atol=1e-9)
        assert np.allclose(u.to_array(), z[0:4], atol=1e-9)

    @pytest.mark.parametrize("pinned", [False, True])
    @pytest.mark.parametrize("active", [None, (0, 2), (2, 5)])
    def test_jacobian_matches_dense_finite_differences(self, pinned, active):
        rng = np.random.default_rng(3)
        x0 = recover(lemniscate(0.1), PARAMS)[0] if pinned else None
        problem = tracking_problem(n=5, x0=x0)
        traj = FlatTrajectory(problem.mesh, random_nodes(rng, 6))
        ls = OcpLeastSquares(problem, traj, active)
        z = ls.initial()
        J = ls.jacobian(z).toarray()
        ref = numerical_jacobian(ls.residual, z, 1e-6)
        assert J.shape == (ls.n_res, ls.n_vars)
        assert np.linalg.norm(J - ref) / np.linalg.norm(ref) < 1e-4

    @pytest.mark.parametrize("n", [2, 3, 5, 12])
    @pytest.mark.parametrize("pinned", [False, True])
    def test_block_normal_equations_match_dense(self, n, pinned):
        rng = np.random.default_rng(n)
        x0 = recover(lemniscate(0.0), PARAMS)[0] if pinned else None
        problem = tracking_problem(n=n, x0=x0)
        traj = FlatTrajectory(problem.mesh, random_nodes(rng, n + 1, 0.1))
        ls = OcpLeastSquares(problem, traj)
        z = ls.initial()
        blocks = ls.jacobian_blocks(z)
        e = ls.residual(z)
        J = ls.assemble(blocks).toarray()
        lam = 1e-3 * np.abs(J).max() ** 2
        ref = np.linalg.solve(J.T @ J + lam * np.eye(ls.n_vars), J.T @ e)
        ne = BlockNormalEquations(blocks, e)
        assert (ne.banded is None) == (18 * (n + 1) < BLOCK_DENSE_LIMIT)
        assert np.allclose(ne.b, J.T @ e, rtol=1e-10, atol=1e-8 * np.abs(J.T @ e).max())
        assert np.allclose(ne.solve(lam), ref, rtol=1e-6, atol=1e-9 * np.abs(ref).max())

    def test_boxplus_wraps_only_free_yaw(self):
        x0 = recover(lemniscate(0.0), PARAMS)[0]
        ls = OcpLeastSquares(tracking_problem(n=3, x0=x0), initial_guess(tracking_problem(n=3)))
        assert np.array_equal(ls.angle_index, [4 + 3, 4 + 18 + 3, 4 + 36 + 3])

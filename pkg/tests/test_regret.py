import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igpc.costs import QuadraticCost
from igpc.dynamics import LinearSystem, rollout
from igpc.environments import double_integrator, make_environment
from igpc.gpc import GPCParams
from igpc.outer import IGPCConfig, igpc_run
from igpc.policies import DACPolicy, DACRolloutPolicy, OpenLoopPlan
from igpc.regret import (
    ComparatorSolution,
    average_regret_at,
    comparator_replay,
    comparator_solve,
    planning_regret,
    state_expansion,
    transfer_matrix,
)


class TestTransfer:
    def test_identity_for_adjacent_steps(self, rng):
        s = LinearSystem(rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 1)))
        np.testing.assert_array_equal(transfer_matrix(s, 1, 2), np.eye(2))
        np.testing.assert_allclose(transfer_matrix(s, 0, 3), s.A[2] @ s.A[1])

    def test_requires_forward_time(self):
        with pytest.raises(ValueError):
            transfer_matrix(LinearSystem.time_invariant([[1.0]], [[1.0]], 3), 2, 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3))
    def test_state_expansion_matches_rollout(self, seed, L):
        rng = np.random.default_rng(seed)
        T = 7
        s = LinearSystem(rng.normal(size=(T, 2, 2)) * 0.7, rng.normal(size=(T, 2, 1)))
        u, w = rng.normal(size=(T, 1)), rng.normal(size=(T, 2))
        M = rng.normal(size=(L, 1, 2))
        rec = rollout(s, DACRolloutPolicy(DACPolicy(M), OpenLoopPlan(u)), QuadraticCost(np.eye(2), np.eye(1)), w)
        M_seq = np.repeat(M[None], T, 0)
        for t in range(T + 1):
            np.testing.assert_allclose(state_expansion(s, u, M_seq, w, t), rec.states[t], atol=1e-10)


class TestComparator:
    def setup_method(self):
        self.cost = QuadraticCost(np.eye(1), np.eye(1))

    def test_zero_disturbance(self):
        s = LinearSystem.time_invariant([[0.5]], [[1.0]], 6)
        sol = comparator_solve([(s, np.zeros((6, 1)), self.cost)] * 2, {"ball": 10.0}, 1.0, 2)
        assert np.all(sol.u_star == 0)
        assert sol.total == 0
        assert sol.diagnostics["exact"]

    def test_constant_offset_closed_form(self):
        # cost x^2 only, w = c: cancel the offset each step, so u_t = -c except
        # at the last step, which moves only the uncosted terminal state
        T, c = 8, 0.3
        s = LinearSystem.time_invariant([[0.5]], [[1.0]], T)
        cost = QuadraticCost(np.eye(1), np.zeros((1, 1)))
        sol = comparator_solve([(s, np.full((T, 1), c), cost)], {"ball": 10.0}, 0.0, 1)
        np.testing.assert_allclose(sol.u_star[: T - 1, 0], -c, atol=1e-6)
        assert sol.total == pytest.approx(0.0, abs=1e-10)

    def test_box_constraint_binds(self, rng):
        s = LinearSystem.time_invariant([[0.9]], [[1.0]], 6)
        specs = [(s, rng.normal(size=(6, 1)), self.cost) for _ in range(3)]
        sol = comparator_solve(specs, {"box": [-0.05, 0.05]}, 0.5, 2, x0=np.array([3.0]))
        assert not sol.diagnostics["exact"]
        assert sol.diagnostics["converged"]
        assert np.all(np.abs(sol.u_star) <= 0.05 + 1e-12)
        for _ in range(20):
            u = rng.uniform(-0.05, 0.05, size=(6, 1))
            J = sum(rollout(sp[0], OpenLoopPlan(u), self.cost, sp[1], np.array([3.0])).loss for sp in specs)
            assert sol.total <= J + 1e-9

    def test_replay_gives_zero_regret(self, rng):
        env = double_integrator(T=20, stabilizer=[[0.5, 1.0]], x0=[1.0, 0.0])
        specs = [(env.system, rng.normal(size=(20, 2)) * 0.1, env.cost) for _ in range(3)]
        sol = comparator_solve(specs, {"ball": 1e3}, 1.0, 2, x0=env.x0)
        replayed = comparator_replay(sol, specs, env.x0)
        np.testing.assert_allclose(replayed, sol.per_rollout, rtol=1e-9)
        assert planning_regret(replayed, sol).cumulative == pytest.approx(0.0, abs=1e-9)

    def test_nonlinear_is_best_found(self):
        env = make_environment("reacher_2dof", T=5)
        sol = comparator_solve([(env.system, np.zeros((5, 6)), env.cost)], {"ball": 5.0}, 1.0, 1, x0=env.x0,
                               restarts=1, max_iter=200)
        assert sol.diagnostics["solver"] == "projected_gradient"
        assert not sol.diagnostics["convex"]
        start = rollout(env.system, OpenLoopPlan(np.zeros((5, 2))), env.cost, None, env.x0).loss
        assert sol.total <= start


class TestRegretLedger:
    def test_arithmetic(self):
        sol = ComparatorSolution(np.zeros((1, 1)), [], np.array([7.0]))
        rep = planning_regret([10.0], sol)
        assert rep.cumulative == 3.0
        assert rep.average == 3.0

    def test_series(self):
        sol = ComparatorSolution(np.zeros((1, 1)), [], np.array([1.0, 1.0, 2.0]))
        rep = planning_regret([2.0, 1.5, 2.0], sol)
        np.testing.assert_allclose(rep.series, [1.0, 1.5, 1.5])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            planning_regret([1.0, 2.0], ComparatorSolution(np.zeros((1, 1)), [], np.array([1.0])))

    def test_average_regret_decreases_over_N_and_T(self):
        # monotone over the grid N in {5, 20, 50} x T in {50, 200}
        gamma, L = 1.0, 3
        table = {}
        for T in (50, 200):
            env = double_integrator(T=T, stabilizer=[[0.5, 1.0]], x0=[1.0, 0.0])
            dist = env.disturbance("phase_shifted_sinusoid", 0.1, 0)
            stream = [(env.system, dist.realize(i, T), env.cost) for i in range(50)]
            cfg = IGPCConfig(N=50, gpc=GPCParams(L, 3, 5e-2, gamma), eta_out=2.0, warm_start=True)
            res = igpc_run(stream, cfg, x0=env.x0)
            table[T] = average_regret_at(res.losses, stream, (5, 20, 50), {"ball": 1e3}, gamma, L, x0=env.x0)
        for T in (50, 200):
            assert table[T][5] > table[T][20] > table[T][50]
        for N in (5, 20, 50):
            assert table[200][N] < table[50][N]

import dataclasses
import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import solve

from mpct import admm
from mpct.admm import (SolveStatus, WarmStart, dual_update, scalar_soft_prox, soft_prox, solve as admm_solve,
                       v_update, z_update)
from mpct.errors import DimensionMismatch, InvalidInterval, InvalidParameter
from mpct.oracle import build_slack_qp, build_v_subproblem_qp, grid_prox_oracle, solve_dense_qp
from mpct.precompute import build_cache
from mpct.problem import ReferencePair, assemble_b, assemble_ingredients, with_constraint_mode
from mpct.sim import oscillating_masses


def _random_prox_inputs(count, seed=0):
    rng = np.random.default_rng(seed)
    b = rng.uniform(-10, 10, count)
    c = rng.uniform(-5, 5, count)
    d = c + rng.uniform(1e-3, 5, count)
    alpha = rng.uniform(0, 10, count)
    return b, c, d, alpha


class TestSoftProx:

    @pytest.mark.parametrize('b, c, d, alpha, expected', [
        (0.0, -1.0, 1.0, 1.0, 0.0),
        (2.0, -1.0, 1.0, 0.5, 1.5),
        (2.0, -1.0, 1.0, 1.5, 1.0),
        (-2.0, -1.0, 1.0, 0.5, -1.5),
        (-2.0, -1.0, 1.0, 1.5, -1.0),
    ])
    def test_cases(self, b, c, d, alpha, expected):
        assert scalar_soft_prox(b, c, d, alpha) == expected
        assert soft_prox(np.array([b]), c, d, alpha)[0] == expected

    def test_zero_weight_is_identity(self):
        b = np.array([-3.0, 0.2, 7.0])
        assert_array_equal(soft_prox(b, -1.0, 1.0, 0.0), b)

    def test_rejects_empty_interval(self):
        with pytest.raises(InvalidInterval):
            scalar_soft_prox(0.0, 1.0, 1.0, 1.0)

    def test_rejects_negative_weight(self):
        with pytest.raises(InvalidParameter):
            scalar_soft_prox(0.0, -1.0, 1.0, -0.1)

    def test_matches_brute_force(self):
        b, c, d, alpha = _random_prox_inputs(100000)
        closed = soft_prox(b, c, d, alpha)
        assert np.abs(closed - grid_prox_oracle(b, c, d, alpha)).max() <= 1e-9

    def test_zero_in_subdifferential(self):
        b, c, d, alpha = _random_prox_inputs(100000, seed=1)
        y = soft_prox(b, c, d, alpha)
        left = y - b + alpha * np.where(y <= c, -1.0, np.where(y > d, 1.0, 0.0))
        right = y - b + alpha * np.where(y < c, -1.0, np.where(y >= d, 1.0, 0.0))
        tol = 1e-12 * (1 + np.abs(b) + alpha)
        assert np.all(left <= tol)
        assert np.all(right >= -tol)

    def test_boundary_conditions(self):
        b, c, d, alpha = _random_prox_inputs(100000, seed=2)
        y = soft_prox(b, c, d, alpha)
        y1, y2, y3 = b + alpha, b, b - alpha
        at_c = (y == c) & (y1 != c)
        at_d = (y == d) & (y2 != d)
        assert np.all((y1[at_c] > c[at_c]) & (y2[at_c] < c[at_c]))
        assert np.all((y2[at_d] > d[at_d]) & (y3[at_d] < d[at_d]))


class TestUpdates:

    def test_z_update_homogeneous(self, benchmark):
        p = benchmark.problem
        ing = assemble_ingredients(p, ReferencePair(np.zeros(6), np.zeros(2)))
        cache = build_cache(ing)
        z = z_update(cache, ing, assemble_b(ing, np.zeros(6)), np.zeros(p.n_v), np.zeros(p.n_v))
        assert_allclose(z, 0.0, atol=1e-14)

    def test_z_update_matches_dense_kkt(self, toy_problem):
        p = toy_problem()
        ing = assemble_ingredients(p, ReferencePair([0.3], [-0.2]))
        cache = build_cache(ing)
        rng = np.random.default_rng(0)
        v, lam = rng.standard_normal(p.n_v), rng.standard_normal(p.n_v)
        b = assemble_b(ing, [0.7])
        E, G = ing.E.toarray(), ing.G.toarray()
        P = ing.dense_H() + p.rho * E.T @ E
        K = np.block([[P, G.T], [G, np.zeros((p.m_z, p.m_z))]])
        rhs = np.concatenate([-(ing.q + E.T @ (lam - p.rho * v)), b])
        expected = solve(K, rhs)[:p.n_z]
        assert_allclose(z_update(cache, ing, b, v, lam), expected, atol=1e-9)

    def test_z_update_satisfies_equalities(self, benchmark, benchmark_ing, benchmark_cache):
        rng = np.random.default_rng(1)
        b = assemble_b(benchmark_ing, benchmark.initial_states(count=1)[0])
        for _ in range(5):
            v, lam = rng.standard_normal(160), rng.standard_normal(160)
            z = z_update(benchmark_cache, benchmark_ing, b, v, lam)
            assert np.abs(benchmark_ing.G @ z - b).max() <= 1e-9

    def test_v_update_zero_weight(self, benchmark):
        p = with_constraint_mode(benchmark.problem, 'soft', beta=0.0)
        ing = assemble_ingredients(p, benchmark.reference)
        rng = np.random.default_rng(2)
        z, lam = 3 * rng.standard_normal(p.n_z), rng.standard_normal(p.n_v)
        v = v_update(ing, z, lam)
        w = ing.E @ z + lam / p.rho
        soft = ing.bounds.soft_index
        assert_array_equal(v[soft], w[soft])

    def test_v_update_clamps_first_input(self, benchmark, benchmark_ing):
        z = np.zeros(128)
        z[6:8] = [5.0, -5.0]
        v = v_update(benchmark_ing, z, np.zeros(160))
        assert_array_equal(v[6:8], [1.0, 0.0])

    def test_v_update_matches_slack_qp(self, benchmark_ing):
        rng = np.random.default_rng(3)
        z, lam = 0.8 * rng.standard_normal(128), 5 * rng.standard_normal(160)
        qp = build_v_subproblem_qp(benchmark_ing, z, lam)
        reference = solve_dense_qp(qp, tol=1e-10)[:160]
        assert np.abs(v_update(benchmark_ing, z, lam) - reference).max() <= 1e-7

    def test_v_update_wrong_dual_length(self, benchmark_ing):
        with pytest.raises(DimensionMismatch):
            v_update(benchmark_ing, np.zeros(128), np.zeros(10))

    def test_dual_update(self):
        E = np.eye(4)
        z = np.array([1.0, 2.0, 3.0, 4.0])
        lam = np.array([0.5, -0.5, 0.0, 1.0])
        assert_array_equal(dual_update(lam, z, E @ z, 1.2, E), lam)
        v = z.copy()
        v[2] -= 1.0
        assert_allclose(dual_update(np.zeros(4), z, v, 2.0, E), [0.0, 0.0, 2.0, 0.0])


class TestSolve:

    def test_converged_residuals(self, benchmark, benchmark_ing, benchmark_cache):
        x = benchmark.initial_states(count=1)[0]
        report, state = admm_solve(benchmark.problem, benchmark.reference, x, cache=benchmark_cache,
                                   ing=benchmark_ing)
        assert report.status is SolveStatus.CONVERGED
        assert state.primal_residual <= 1e-4 and state.dual_residual <= 1e-4
        assert np.abs(benchmark_ing.E @ state.z - state.v).max() == pytest.approx(state.primal_residual)
        assert report.iterations == state.k
        assert_array_equal(report.u0, state.v[6:8])

    def test_warm_start_at_optimum(self, benchmark, benchmark_ing, benchmark_cache):
        ref = benchmark.reference
        z = np.tile(np.concatenate([ref.x_r, ref.u_r]), 16)
        warm = WarmStart(benchmark_ing.E @ z, np.zeros(160))
        report, state = admm_solve(benchmark.problem, ref, ref.x_r, warm=warm, cache=benchmark_cache,
                                   ing=benchmark_ing)
        assert report.converged
        assert report.iterations <= 2
        assert_allclose(report.u0, ref.u_r, atol=1e-9)
        assert report.objective == pytest.approx(0.0, abs=1e-9)

    def test_shifted_warm_start(self):
        v, lam = np.arange(12.0), -np.arange(12.0)
        out = WarmStart(v, lam).shifted(3)
        assert_array_equal(out.v, [3, 4, 5, 6, 7, 8, 9, 10, 11, 9, 10, 11])
        assert_array_equal(out.lam, [-3, -4, -5, -6, -7, -8, -6, -7, -8, -9, -10, -11])
        assert_array_equal(v, np.arange(12.0))
        with pytest.raises(DimensionMismatch):
            WarmStart(v, lam).shifted(5)

    def test_shift_keeps_a_steady_trajectory(self, benchmark, benchmark_ing):
        ref = benchmark.reference
        z = np.tile(np.concatenate([ref.x_r, ref.u_r]), 16)
        warm = WarmStart(benchmark_ing.E @ z, np.zeros(160))
        assert_array_equal(warm.shifted(10).v, warm.v)

    def test_input_bounds_hold_without_convergence(self, benchmark_limits):
        p = dataclasses.replace(with_constraint_mode(benchmark_limits.problem, 'hard'), max_iterations=3)
        report, _ = admm_solve(p, benchmark_limits.reference, benchmark_limits.x0)
        assert report.status is SolveStatus.MAX_ITERATIONS
        assert report.iterations == 3
        assert np.all((report.u0 >= 0.0) & (report.u0 <= 1.0))

    def test_deterministic(self, benchmark, benchmark_ing, benchmark_cache):
        x = benchmark.initial_states(count=2)[1]
        _, a = admm_solve(benchmark.problem, benchmark.reference, x, cache=benchmark_cache, ing=benchmark_ing)
        _, b = admm_solve(benchmark.problem, benchmark.reference, x, cache=benchmark_cache, ing=benchmark_ing)
        assert_array_equal(a.z, b.z)
        assert_array_equal(a.lam, b.lam)

    def test_dual_step_bounded_at_exit(self, benchmark, benchmark_ing, benchmark_cache):
        x = benchmark.initial_states(count=3)[2]
        p = benchmark.problem
        report, state = admm_solve(p, benchmark.reference, x, cache=benchmark_cache, ing=benchmark_ing)
        assert report.converged and report.iterations >= 2
        # replay one iteration short to recover the previous multiplier
        short = dataclasses.replace(p, max_iterations=report.iterations - 1)
        _, before = admm_solve(short, benchmark.reference, x, cache=benchmark_cache, ing=benchmark_ing)
        assert np.abs(state.lam - before.lam).max() <= p.rho * p.eps_p * (1 + 1e-9)
        soft = benchmark_ing.bounds.soft_index
        assert np.all(np.abs(state.lam[soft]) <= benchmark_ing.bounds.beta[soft] * (1 + 1e-12))

    def test_loop_uses_update_steps(self, benchmark, benchmark_ing, benchmark_cache, monkeypatch):
        calls = {'v': 0, 'lambda': 0}

        def counting(name, fn):
            def wrapped(*args, **kwargs):
                calls[name] += 1
                return fn(*args, **kwargs)
            return wrapped

        monkeypatch.setattr(admm, 'v_update', counting('v', admm.v_update))
        monkeypatch.setattr(admm, 'dual_update', counting('lambda', admm.dual_update))
        report, _ = admm.solve(benchmark.problem, benchmark.reference, np.zeros(6), cache=benchmark_cache,
                               ing=benchmark_ing)
        assert calls == {'v': report.iterations, 'lambda': report.iterations}

    def test_stale_cache_is_rebuilt(self, benchmark, benchmark_cache):
        p = dataclasses.replace(benchmark.problem, rho=2.0)
        report, _ = admm_solve(p, benchmark.reference, np.zeros(6), cache=benchmark_cache)
        assert report.converged

    def test_warm_start_shape(self, benchmark, benchmark_ing, benchmark_cache):
        with pytest.raises(DimensionMismatch):
            admm_solve(benchmark.problem, benchmark.reference, np.zeros(6), warm=WarmStart.cold(10),
                       cache=benchmark_cache, ing=benchmark_ing)

    def test_report_dict(self, benchmark, benchmark_ing, benchmark_cache):
        report, _ = admm_solve(benchmark.problem, benchmark.reference, np.zeros(6), cache=benchmark_cache,
                               ing=benchmark_ing)
        out = report.to_dict(timing=False)
        assert out['status'] == 'converged'
        assert out['time_s'] == 0.0
        assert set(out['phase_times_s']) == {'z', 'v', 'lambda'}
        assert len(out['u0']) == 2 and len(out['xs']) == 6 and len(out['us']) == 2


class TestAgainstOracle:

    @pytest.mark.parametrize('seed', range(50))
    def test_random_soft_instances(self, make_instance, seed):
        p, ref, x = make_instance(seed, eps=1e-6, max_iterations=50000)
        report, state = admm_solve(p, ref, x)
        assert report.converged
        w = solve_dense_qp(build_slack_qp(p, ref, x), tol=1e-8)
        assert np.abs(state.z - w[:p.n_z]).max() <= 1e-3
        assert np.abs(report.u0 - w[p.nx:p.nx + p.nu]).max() <= 1e-3

    @pytest.mark.parametrize('seed', range(5))
    def test_exact_penalty(self, benchmark, seed):
        soft = dataclasses.replace(benchmark.problem, eps_p=1e-6, eps_d=1e-6)
        hard = with_constraint_mode(soft, 'hard')
        x = benchmark.initial_states(count=5)[seed]
        _, a = admm_solve(soft, benchmark.reference, x)
        _, b = admm_solve(hard, benchmark.reference, x)
        assert np.abs(a.z - b.z).max() <= 1e-3

    @pytest.mark.slow
    def test_exact_penalty_on_sampled_states(self, benchmark):
        soft = dataclasses.replace(benchmark.problem, eps_p=1e-6, eps_d=1e-6)
        hard = with_constraint_mode(soft, 'hard')
        soft_cache = build_cache(assemble_ingredients(soft, benchmark.reference))
        hard_cache = build_cache(assemble_ingredients(hard, benchmark.reference))
        for x in benchmark.initial_states(count=100, seed=7):
            _, a = admm_solve(soft, benchmark.reference, x, cache=soft_cache)
            _, b = admm_solve(hard, benchmark.reference, x, cache=hard_cache)
            assert np.abs(a.z - b.z).max() <= 1e-3


@pytest.mark.slow
class TestBenchmarkReplication:

    def test_iteration_statistics(self, benchmark, benchmark_ing, benchmark_cache):
        iterations = []
        for x in benchmark.initial_states(count=1000, seed=0):
            report, _ = admm_solve(benchmark.problem, benchmark.reference, x, cache=benchmark_cache,
                                   ing=benchmark_ing)
            assert report.converged
            iterations.append(report.iterations)
        assert 0.8 * 30.7 <= np.mean(iterations) <= 1.2 * 30.7
        assert max(iterations) <= 60
        assert min(iterations) >= 20

    def test_hard_output_limits_do_not_converge(self, benchmark_limits):
        hard = with_constraint_mode(benchmark_limits.problem, 'hard')
        report, _ = admm_solve(hard, benchmark_limits.reference, benchmark_limits.x0)
        assert report.status is SolveStatus.MAX_ITERATIONS

    def test_z_update_scales_linearly(self):

        def per_iteration(horizon):
            scn = oscillating_masses(horizon=horizon)
            ing = assemble_ingredients(scn.problem, scn.reference)
            cache = build_cache(ing)
            b = assemble_b(ing, np.zeros(6))
            v, lam = np.zeros(scn.problem.n_v), np.zeros(scn.problem.n_v)
            best = np.inf
            for _ in range(5):
                start = time.perf_counter()
                for _ in range(20):
                    z_update(cache, ing, b, v, lam)
                best = min(best, (time.perf_counter() - start) / 20)
            return best

        assert 2.5 <= per_iteration(200) / per_iteration(50) <= 6.0

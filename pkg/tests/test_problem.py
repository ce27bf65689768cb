import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import block_diag

from mpct.errors import DimensionMismatch, InvalidBounds, InvalidParameter, NotPositiveDefinite
from mpct.problem import (BoundKind, BoundMode, PlantModel, ReferencePair, StageBounds, Weights, assemble_b,
                          assemble_ingredients, constraint_penalty, mpct_objective, stack_bounds, validate,
                          with_constraint_mode)


def _codes(diagnostics):
    return [(d.code, d.field) for d in diagnostics]


class TestTypes:

    def test_plant_dimensions(self):
        m = PlantModel(np.eye(3), np.ones((3, 2)), np.ones((1, 3)), np.zeros((1, 2)))
        assert (m.nx, m.nu, m.ny) == (3, 2, 1)

    def test_plant_mismatch(self):
        with pytest.raises(DimensionMismatch):
            PlantModel(np.eye(3), np.ones((3, 2)), np.ones((1, 2)), np.zeros((1, 2)))
        with pytest.raises(DimensionMismatch):
            PlantModel(np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 3)), np.zeros((1, 1)))

    def test_bound_mode(self):
        assert BoundMode.soft(3).kind == BoundKind.SOFT
        assert BoundMode.free().kind == BoundKind.FREE
        with pytest.raises(InvalidParameter):
            BoundMode.soft(-1.0)

    def test_constant_bounds_with_reference_override(self):
        b = StageBounds.constant(2, 1, 1, 1, x=(-1.0, 1.0), u=(0.0, 2.0), xs=(-0.5, 0.5))
        assert b.lower.shape == (3, 3)
        assert b.horizon == 2
        assert_array_equal(b.lower[0], [-1.0, 0.0, -np.inf])
        assert_array_equal(b.upper[2], [0.5, 2.0, np.inf])
        assert b.mode_at(1, 0) == BoundMode.hard()

    def test_with_mode_on_selection(self):
        b = StageBounds.constant(2, 1, 1, 1).with_mode(BoundMode.soft(5.0), columns=2)
        assert b.mode_at(0, 2) == BoundMode.soft(5.0)
        assert b.mode_at(0, 1) == BoundMode.hard()


class TestAssembly:

    def test_toy_cost_and_dynamics(self, toy_problem):
        ing = assemble_ingredients(toy_problem(rho=0.0), ReferencePair([0.0], [0.0]))
        expected_H = [[1, 0, -1, 0], [0, 1, 0, -1], [-1, 0, 2, 0], [0, -1, 0, 2]]
        assert_array_equal(ing.dense_H(), expected_H)
        assert_allclose(ing.G.toarray(), [[1, 0, 0, 0], [0.9, 0.5, -1, 0], [0, 0, 0.9 - 1, 0.5]])
        assert ing.problem.m_z == 3

    def test_benchmark_dimensions(self, benchmark_ing):
        p = benchmark_ing.problem
        assert (p.n_z, p.m_z, p.n_v) == (128, 102, 160)
        assert benchmark_ing.G.shape == (102, 128)
        assert benchmark_ing.E.shape == (160, 128)
        assert benchmark_ing.low_rank.rank == 16

    def test_equality_matrix_has_full_row_rank(self, benchmark_ing):
        s = np.linalg.svd(benchmark_ing.G.toarray(), compute_uv=False)
        assert s.size == 102
        assert s[-1] > 1e-8 * s[0]

    @pytest.mark.parametrize('seed', range(10))
    def test_random_equality_matrix_full_row_rank(self, make_instance, seed):
        p, ref, _ = make_instance(300 + seed, horizon=4, nx=3)
        G = assemble_ingredients(p, ref).G.toarray()
        assert np.linalg.matrix_rank(G) == p.m_z

    def test_gamma_hat_blocks(self, make_instance):
        p, ref, _ = make_instance(11, horizon=3)
        ing = assemble_ingredients(p, ref)
        w, m, rho = p.weights, p.model, p.rho
        nx, nu = p.nx, p.nu
        stage = np.block([[w.Q + rho * (np.eye(nx) + m.C.T @ m.C), rho * m.C.T @ m.D],
                          [rho * m.D.T @ m.C, w.R + rho * (np.eye(nu) + m.D.T @ m.D)]])
        assert_allclose(ing.gamma_hat.blocks[0], stage, atol=1e-12)
        terminal = block_diag(3 * w.Q + w.T, 3 * w.R + w.S) + stage - block_diag(w.Q, w.R)
        assert_allclose(ing.gamma_hat.blocks[-1], terminal, atol=1e-12)

    def test_decomposition_reproduces_H(self, make_instance):
        p, ref, _ = make_instance(12, horizon=4)
        ing = assemble_ingredients(p, ref)
        ETE = (ing.E.T @ ing.E).toarray()
        rebuilt = ing.gamma_hat.to_dense() + ing.low_rank.U @ ing.low_rank.V - p.rho * ETE
        assert_allclose(rebuilt, ing.dense_H(), atol=1e-12)

    def test_apply_H(self, make_instance):
        p, ref, _ = make_instance(13)
        ing = assemble_ingredients(p, ref)
        z = np.random.default_rng(0).standard_normal(p.n_z)
        assert_allclose(ing.apply_H(z), ing.dense_H() @ z, atol=1e-12)

    def test_linear_cost(self, benchmark_ing):
        p, ref = benchmark_ing.problem, benchmark_ing.reference
        q = benchmark_ing.q
        assert not np.any(q[:-8])
        assert_allclose(q[-8:], -np.concatenate([p.weights.T @ ref.x_r, p.weights.S @ ref.u_r]))

    def test_with_reference_only_changes_q(self, benchmark_ing):
        other = benchmark_ing.with_reference(ReferencePair(np.zeros(6), np.zeros(2)))
        assert not np.any(other.q)
        assert other.G is benchmark_ing.G
        assert other.gamma_hat is benchmark_ing.gamma_hat

    def test_reference_shape(self, benchmark):
        with pytest.raises(DimensionMismatch):
            assemble_ingredients(benchmark.problem, ReferencePair(np.zeros(5), np.zeros(2)))

    def test_weight_errors(self, benchmark):
        p = benchmark.problem
        w = p.weights
        bad = dataclasses.replace(p, weights=Weights(w.Q, -w.R, w.T, w.S))
        with pytest.raises(NotPositiveDefinite) as e:
            assemble_ingredients(bad, benchmark.reference)
        assert e.value.where == 'R'
        bad = dataclasses.replace(p, weights=Weights(w.Q[:5, :5], w.R, w.T, w.S))
        with pytest.raises(DimensionMismatch):
            assemble_ingredients(bad, benchmark.reference)


class TestRightHandSide:

    def test_zero_state(self, benchmark_ing):
        assert not np.any(assemble_b(benchmark_ing, np.zeros(6)))

    def test_definition(self, make_instance):
        p, ref, _ = make_instance(3, horizon=1, nx=2)
        b = assemble_b(assemble_ingredients(p, ref), [1.0, 2.0])
        assert_array_equal(b, [1, 2, 0, 0, 0, 0])

    def test_benchmark_trailing_zeros(self, benchmark, benchmark_ing):
        x = benchmark.initial_states(count=1)[0]
        b = assemble_b(benchmark_ing, x)
        assert_array_equal(b[:6], x)
        assert b[6:].shape == (96,) and not np.any(b[6:])

    def test_wrong_state_length(self, benchmark_ing):
        with pytest.raises(DimensionMismatch):
            assemble_b(benchmark_ing, np.zeros(4))


class TestStackBounds:

    def test_ordering(self):
        from mpct.problem import ProblemData
        model = PlantModel([[1.0]], [[1.0]], [[1.0]], [[0.0]])
        bounds = StageBounds.constant(1, 1, 1, 1, x=(-1.0, 1.0), u=(-2.0, 2.0), y=(-3.0, 3.0), xs=(-4.0, 4.0))
        p = ProblemData(model, Weights(1.0, 1.0, 1.0, 1.0), 1, bounds)
        s = stack_bounds(p)
        assert p.n_v == 6
        assert_array_equal(s.lower, [-np.inf, -2, -3, -4, -2, -3])
        assert_array_equal(s.upper, [np.inf, 2, 3, 4, 2, 3])
        assert_array_equal(s.kind, [BoundKind.FREE] + [BoundKind.HARD] * 5)

    def test_hard_mode(self, benchmark):
        s = stack_bounds(with_constraint_mode(benchmark.problem, 'hard'))
        assert_array_equal(s.free_index, np.arange(6))
        assert s.hard_index.size == 154
        assert s.soft_index.size == 0
        assert not np.any(s.beta)

    def test_soft_mode(self, benchmark):
        s = stack_bounds(benchmark.problem)
        assert_array_equal(s.hard_index, [6, 7])
        assert s.soft_index.size == 152
        assert_array_equal(s.beta[s.soft_index], 10.0)
        assert_array_equal(s.beta[:8], 0.0)

    def test_invalid_bounds(self, benchmark):
        p = benchmark.problem
        lower = p.bounds.lower.copy()
        lower[0, 6] = 2.0
        bad = dataclasses.replace(p, bounds=dataclasses.replace(p.bounds, lower=lower))
        with pytest.raises(InvalidBounds) as e:
            stack_bounds(bad)
        assert e.value.field == 'u0'


class TestValidate:

    def test_benchmark_is_valid(self, benchmark):
        assert validate(benchmark.problem) == []

    def test_singular_Q(self, benchmark):
        p = benchmark.problem
        w = p.weights
        Q = np.diag([2.5, 0.0, 2.5, 0.5, 0.5, 0.5])
        assert _codes(validate(dataclasses.replace(p, weights=Weights(Q, w.R, w.T, w.S)))) == \
            [('NotPositiveDefinite', 'Q')]

    def test_inverted_input_bounds(self, benchmark):
        p = benchmark.problem
        lower = p.bounds.lower.copy()
        lower[0, 6] = 2.0
        bad = dataclasses.replace(p, bounds=dataclasses.replace(p.bounds, lower=lower))
        assert _codes(validate(bad)) == [('InvalidBounds', 'u0')]

    def test_solver_settings(self, toy_problem):
        p = dataclasses.replace(toy_problem(rho=0.0), eps_p=0.0, max_iterations=0)
        assert _codes(validate(p)) == [('InvalidParameter', 'N'), ('InvalidParameter', 'rho'),
                                       ('InvalidParameter', 'eps_p'), ('InvalidParameter', 'max_iter')]

    def test_diagnostic_text(self):
        from mpct.problem import Diagnostic
        assert str(Diagnostic('InvalidBounds', 'u0', 'lower >= upper')) == 'InvalidBounds(u0): lower >= upper'


class TestObjective:

    def test_penalty(self, benchmark_ing):
        v = np.zeros(160)
        v[10] = 1.1
        assert constraint_penalty(benchmark_ing.bounds, v) == pytest.approx(5.0)
        v[10] = 0.5
        assert constraint_penalty(benchmark_ing.bounds, v) == 0.0

    def test_zero_at_reference(self, benchmark_ing):
        ref = benchmark_ing.reference
        z = np.tile(np.concatenate([ref.x_r, ref.u_r]), 16)
        v = benchmark_ing.E @ z
        assert mpct_objective(benchmark_ing, z, v) == pytest.approx(0.0, abs=1e-10)


class TestConstraintMode:

    def test_hard_keeps_weights(self, benchmark):
        hard = with_constraint_mode(benchmark.problem, 'hard')
        assert np.all(hard.bounds.kind == BoundKind.HARD)
        assert_array_equal(hard.bounds.weight, benchmark.problem.bounds.weight)
        soft = with_constraint_mode(hard, 'soft')
        assert np.all(soft.bounds.kind == BoundKind.SOFT)
        assert_array_equal(soft.bounds.weight, 10.0)

    def test_soft_with_new_weights(self, benchmark):
        soft = with_constraint_mode(benchmark.problem, 'soft', beta=np.arange(160.0))
        assert soft.bounds.weight[1, 0] == 10.0
        assert_array_equal(with_constraint_mode(benchmark.problem, 'soft', beta=3.0).bounds.weight, 3.0)

    def test_rejects(self, benchmark):
        with pytest.raises(InvalidParameter):
            with_constraint_mode(benchmark.problem, 'soft', beta=-1.0)
        with pytest.raises(InvalidParameter):
            with_constraint_mode(benchmark.problem, 'loose')

    def test_soft_needs_stored_or_given_weights(self, toy_problem):
        p = toy_problem()
        with pytest.raises(InvalidParameter) as e:
            with_constraint_mode(p, 'soft')
        assert e.value.name == 'beta'
        assert np.all(with_constraint_mode(p, 'soft', beta=2.0).bounds.weight == 2.0)

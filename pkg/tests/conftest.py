import numpy as np
import pytest

from mpct.precompute import build_cache
from mpct.problem import (BoundMode, PlantModel, ProblemData, ReferencePair, StageBounds, Weights,
                          assemble_ingredients)
from mpct.sim import oscillating_masses


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long benchmark replication runs (deselect with -m "not slow")')


def _spd(rng, n, shift=0.5):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + shift * np.eye(n)


def random_instance(seed, horizon=None, nx=None, nu=None, ny=None, mode='soft', beta=10.0, rho=1.2,
                    eps=1e-4, max_iterations=5000):
    """ A random stable plant with SPD weights and box limits on x, u and y. """
    rng = np.random.default_rng(seed)
    horizon = horizon or int(rng.integers(2, 6))
    nx = nx or int(rng.integers(1, 5))
    nu = nu or int(rng.integers(1, 3))
    ny = ny or int(rng.integers(1, 3))
    A = rng.standard_normal((nx, nx))
    A *= 0.95 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-3)
    model = PlantModel(A, rng.standard_normal((nx, nu)), rng.standard_normal((ny, nx)),
                       0.1 * rng.standard_normal((ny, nu)))
    weights = Weights(_spd(rng, nx), _spd(rng, nu), _spd(rng, nx, 2.0), _spd(rng, nu, 2.0))
    kind = BoundMode.soft(beta) if mode == 'soft' else BoundMode.hard()
    bounds = StageBounds.constant(horizon, nx, nu, ny,
                                  x=(-rng.uniform(2, 4, nx), rng.uniform(2, 4, nx)),
                                  u=(-np.ones(nu), np.ones(nu)),
                                  y=(-rng.uniform(2, 4, ny), rng.uniform(2, 4, ny)), mode=kind)
    problem = ProblemData(model, weights, horizon, bounds, rho=rho, eps_p=eps, eps_d=eps,
                          max_iterations=max_iterations)
    reference = ReferencePair(rng.uniform(-0.3, 0.3, nx), rng.uniform(-0.3, 0.3, nu))
    return problem, reference, rng.uniform(-1, 1, nx)


@pytest.fixture
def make_instance():
    return random_instance


@pytest.fixture
def toy_problem():
    """ N = 1, one state, one input, one (zero) output, unit weights. """
    def build(rho=1.0, mode=BoundMode.hard()):
        model = PlantModel([[0.9]], [[0.5]], [[0.0]], [[0.0]])
        weights = Weights([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        bounds = StageBounds.constant(1, 1, 1, 1, x=(-10.0, 10.0), u=(-10.0, 10.0), mode=mode)
        return ProblemData(model, weights, 1, bounds, rho=rho)
    return build


@pytest.fixture(scope='session')
def benchmark():
    return oscillating_masses()


@pytest.fixture(scope='session')
def benchmark_limits():
    return oscillating_masses(output_limit=0.07)


@pytest.fixture(scope='session')
def benchmark_ing(benchmark):
    return assemble_ingredients(benchmark.problem, benchmark.reference)


@pytest.fixture(scope='session')
def benchmark_cache(benchmark_ing):
    return build_cache(benchmark_ing)

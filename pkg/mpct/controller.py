from abc import ABC, abstractmethod
import logging
import time

import numpy as np

from .admm import SolveReport, SolveStatus, WarmStart, solve
from .errors import Infeasible, InvalidParameter, NotConverged
from .oracle import build_slack_qp, interior_point
from .precompute import build_cache, cached_build
from .problem import ProblemData, ReferencePair, assemble_ingredients, with_constraint_mode

log = logging.getLogger(__name__)


class Controller(ABC):
    """
    Parent class for the receding-horizon controllers.

    Parameters
    ----------
    problem : ProblemData
        MPCT problem (plant, weights, horizon, bounds, solver settings)
    reference : ReferencePair
        target equilibrium (x_r, u_r)
    """
    name = 'controller'

    def __init__(self, problem: ProblemData, reference: ReferencePair):
        self.problem = problem
        self.reference = reference
        self.ing = assemble_ingredients(problem, reference)

    @abstractmethod
    def solve(self, x_current, warm=None):
        """
        Compute the control action for state `x_current`.

        Returns
        -------
        (SolveReport, WarmStart or None)
        """


class ADMMController(Controller):
    """
    The structure-exploiting ADMM solver. The factorization is done once
    here and reused by every solve.
    """
    name = 'admm'

    def __init__(self, problem, reference, cache=None, cache_dir=None):
        super().__init__(problem, reference)
        if cache is not None and cache.is_valid_for(problem):
            self.cache = cache
        else:
            self.cache = cached_build(self.ing, cache_dir) if cache_dir else build_cache(self.ing)

    def solve(self, x_current, warm=None):
        report, state = solve(self.problem, self.reference, x_current, warm=warm,
                              cache=self.cache, ing=self.ing)
        return report, WarmStart.from_state(state)


class SlackQPController(Controller):
    """
    The classical slack-variable soft-constraint encoding solved by the dense
    interior-point reference solver. Slow; used for comparison only.
    """
    name = 'oracle'

    def __init__(self, problem, reference, tol=1e-8):
        super().__init__(problem, reference)
        self.tol = tol

    def solve(self, x_current, warm=None):
        p, ing = self.problem, self.ing
        nx, nu = p.nx, p.nu
        qp = build_slack_qp(p, self.reference, x_current, ing=ing)
        start = time.perf_counter()
        try:
            w, iterations = interior_point(qp, tol=self.tol)
            status = SolveStatus.CONVERGED
        except Infeasible:
            w, iterations, status = None, 0, SolveStatus.INFEASIBLE
        except NotConverged:
            w, iterations, status = None, 0, SolveStatus.MAX_ITERATIONS
        elapsed = time.perf_counter() - start

        lower, upper = ing.bounds.lower[nx:nx + nu], ing.bounds.upper[nx:nx + nu]
        if w is None:
            log.warning('slack QP not solved (%s)', status.value)
            u0 = np.clip(np.zeros(nu), lower, upper)
            report = SolveReport(status=status, iterations=iterations, solve_time=elapsed,
                                 objective=np.nan, u0=u0, xs=np.full(nx, np.nan), us=np.full(nu, np.nan),
                                 phase_times={})
        else:
            z = w[:p.n_z]
            tail = z[-(nx + nu):]
            report = SolveReport(status=status, iterations=iterations, solve_time=elapsed,
                                 objective=qp.objective(w), u0=np.clip(z[nx:nx + nu], lower, upper),
                                 xs=tail[:nx].copy(), us=tail[nx:].copy(), phase_times={})
        return report, None


def make_controller(mode, problem: ProblemData, reference: ReferencePair, cache=None, cache_dir=None):
    """
    Controller for a constraint mode.

    'soft' and 'hard' run ADMM on the problem re-encoded in that mode;
    'oracle' solves the soft problem with explicit slack variables.
    """
    if mode in ('soft', 'hard'):
        return ADMMController(with_constraint_mode(problem, mode), reference, cache=cache, cache_dir=cache_dir)
    if mode == 'oracle':
        return SlackQPController(with_constraint_mode(problem, 'soft'), reference)
    raise InvalidParameter('mode', "mode must be 'soft', 'hard' or 'oracle', got {!r}".format(mode))

"""
ADMM for the (soft-constrained) MPCT problem.

Each iteration:
    z-update  equality-constrained QP, solved with the factored P and W
    v-update  separable prox: identity (free), clamp (hard) or the closed-form
              soft-penalty prox (soft)
    dual      lambda += rho (E z - v)
and stops once ||E z - v||_inf <= eps_p and ||v - v_prev||_inf <= eps_d.
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionMismatch, InvalidInterval, InvalidParameter
from .precompute import FactorCache, build_cache, solve_P, solve_W
from .problem import (Ingredients, ProblemData, ReferencePair, StackedBounds, assemble_b,
                      assemble_ingredients, mpct_objective)

log = logging.getLogger(__name__)


class SolveStatus(str, Enum):
    CONVERGED = 'converged'
    MAX_ITERATIONS = 'max_iterations'
    # only reported by the slack-variable reference controller
    INFEASIBLE = 'infeasible'


@dataclass
class SolverState:
    z: np.ndarray
    v: np.ndarray
    v_prev: np.ndarray
    lam: np.ndarray
    k: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf


@dataclass(frozen=True, eq=False)
class WarmStart:
    """ Initial (v, lambda) for the next solve. """
    v: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_state(cls, state: SolverState):
        return cls(state.v.copy(), state.lam.copy())

    @classmethod
    def cold(cls, n_v):
        return cls(np.zeros(n_v), np.zeros(n_v))

    def shifted(self, stage_width):
        """
        Move every stage block of (v, lambda) one step forward in time.

        Stage i takes stage i+1 for i < N-1. The last prediction stage takes
        the steady-state row for v and keeps its own multiplier; the
        steady-state row itself is unchanged.
        """
        if self.v.size % stage_width:
            raise DimensionMismatch('{} entries do not split into stages of {}'.format(self.v.size, stage_width))
        v = self.v.reshape(-1, stage_width).copy()
        lam = self.lam.reshape(-1, stage_width).copy()
        v[:-2], lam[:-2] = v[1:-1].copy(), lam[1:-1].copy()
        v[-2] = v[-1]
        return WarmStart(v.ravel(), lam.ravel())


@dataclass
class SolveReport:
    status: SolveStatus
    iterations: int
    solve_time: float
    objective: float
    u0: np.ndarray
    xs: np.ndarray
    us: np.ndarray
    phase_times: dict = field(default_factory=lambda: {'z': 0.0, 'v': 0.0, 'lambda': 0.0})

    @property
    def converged(self):
        return self.status == SolveStatus.CONVERGED

    def to_dict(self, timing=True):
        return {
            'status': self.status.value,
            'iterations': int(self.iterations),
            'time_s': float(self.solve_time) if timing else 0.0,
            'phase_times_s': {k: (float(t) if timing else 0.0) for k, t in sorted(self.phase_times.items())},
            'objective': float(self.objective),
            'u0': [float(u) for u in self.u0],
            'xs': [float(x) for x in self.xs],
            'us': [float(u) for u in self.us],
        }


def z_update(cache: FactorCache, ing: Ingredients, b, v, lam, rho=None):
    """
    argmin_z 1/2 z'Hz + q'z + lam'(Ez - v) + rho/2 ||Ez - v||^2  s.t.  Gz = b

        P xi = p,   W mu = -(G xi + b),   P z = -(G' mu + p)

    with p = q + E'(lam - rho v).
    """
    rho = ing.problem.rho if rho is None else rho
    p = ing.q + ing.E.T @ (lam - rho * v)
    xi = solve_P(cache, p)
    mu = solve_W(cache, -(ing.G @ xi + b))
    return solve_P(cache, -(ing.G.T @ mu + p))


def scalar_soft_prox(b, c, d, alpha):
    """
    argmin_y 1/2 y^2 - b y + alpha max(c - y, y - d, 0)

    With y1 = b + alpha, y2 = b, y3 = b - alpha the minimiser is the first
    matching case of: y1 <= c -> y1; y2 < c -> c; y2 <= d -> y2; y3 < d -> d;
    otherwise y3.
    """
    if not c < d:
        raise InvalidInterval('need c < d, got c={} d={}'.format(c, d))
    if not (np.isfinite(alpha) and alpha >= 0):
        raise InvalidParameter('alpha', 'alpha must be finite and >= 0, got {}'.format(alpha))
    y1, y2, y3 = b + alpha, b, b - alpha
    if y1 <= c:
        return y1
    if y2 < c:
        return c
    if y2 <= d:
        return y2
    if y3 < d:
        return d
    return y3


def soft_prox(b, c, d, alpha):
    """ Elementwise scalar_soft_prox for arrays (no interval checks). """
    y1, y2, y3 = b + alpha, b, b - alpha
    return np.select([y1 <= c, y2 < c, y2 <= d, y3 < d], [y1, c, y2, d], default=y3)


def _prox_step(bounds: StackedBounds, w, rho):
    v = w.copy()
    h = bounds.hard_index
    v[h] = np.minimum(np.maximum(w[h], bounds.lower[h]), bounds.upper[h])
    s = bounds.soft_index
    v[s] = soft_prox(w[s], bounds.lower[s], bounds.upper[s], bounds.beta[s] / rho)
    return v


def v_update(ing: Ingredients, z, lam, rho=None):
    """ argmin_v g(v) - lam'v + rho/2 ||Ez - v||^2, componentwise. """
    rho = ing.problem.rho if rho is None else rho
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (ing.problem.n_v,):
        raise DimensionMismatch('lambda must have {} entries, got {}'.format(ing.problem.n_v, lam.shape))
    return _prox_step(ing.bounds, ing.E @ z + lam / rho, rho)


def dual_update(lam, z, v, rho, E):
    """ lam + rho (E z - v). """
    return lam + rho * (E @ z - v)


def _extract(ing: Ingredients, z, v):
    nx, nu = ing.problem.nx, ing.problem.nu
    tail = z[-(nx + nu):]
    return v[nx:nx + nu].copy(), tail[:nx].copy(), tail[nx:].copy()


def solve(p: ProblemData, ref: ReferencePair, x_current, warm: WarmStart = None,
          cache: FactorCache = None, ing: Ingredients = None):
    """
    Run ADMM from `warm` (or v = 0, lambda = 0) until both residual tests pass
    or p.max_iterations is reached.

    `ing` and `cache` may be passed to skip assembly and factorization; the
    cache is rebuilt if it was made for different factor inputs.

    Returns
    -------
    (SolveReport, SolverState)
        u0 in the report is read from v, so it satisfies its hard bounds even
        when the solve did not converge
    """
    if ing is None:
        ing = assemble_ingredients(p, ref)
    elif ref is not None and ref is not ing.reference:
        ing = ing.with_reference(ref)
    if cache is None or not cache.is_valid_for(p):
        if cache is not None:
            log.warning('factor cache does not match the problem, rebuilding')
        cache = build_cache(ing)
    b = assemble_b(ing, x_current)
    n_v, rho = p.n_v, p.rho
    warm = warm or WarmStart.cold(n_v)
    if warm.v.shape != (n_v,) or warm.lam.shape != (n_v,):
        raise DimensionMismatch('warm start must have {} entries'.format(n_v))

    state = SolverState(z=np.zeros(p.n_z), v=warm.v.copy(), v_prev=warm.v.copy(), lam=warm.lam.copy())
    phase = {'z': 0.0, 'v': 0.0, 'lambda': 0.0}
    status = SolveStatus.MAX_ITERATIONS
    start = time.perf_counter()
    while state.k < p.max_iterations:
        t0 = time.perf_counter()
        z = z_update(cache, ing, b, state.v, state.lam, rho)
        t1 = time.perf_counter()
        v = v_update(ing, z, state.lam, rho)
        t2 = time.perf_counter()
        lam = dual_update(state.lam, z, v, rho, ing.E)
        t3 = time.perf_counter()
        # E z - v, recovered from the multiplier step
        r = (lam - state.lam) / rho
        state.lam = lam
        phase['z'] += t1 - t0
        phase['v'] += t2 - t1
        phase['lambda'] += t3 - t2

        state.z, state.v_prev, state.v = z, state.v, v
        state.k += 1
        state.primal_residual = float(np.max(np.abs(r), initial=0.0))
        state.dual_residual = float(np.max(np.abs(v - state.v_prev), initial=0.0))
        log.debug('k=%d r_p=%.3e r_d=%.3e', state.k, state.primal_residual, state.dual_residual)
        if state.primal_residual <= p.eps_p and state.dual_residual <= p.eps_d:
            status = SolveStatus.CONVERGED
            break
    elapsed = time.perf_counter() - start

    if status is SolveStatus.MAX_ITERATIONS:
        log.warning('ADMM stopped after %d iterations (r_p=%.2e, r_d=%.2e)',
                    state.k, state.primal_residual, state.dual_residual)
    u0, xs, us = _extract(ing, state.z, state.v)
    report = SolveReport(status=status, iterations=state.k, solve_time=elapsed,
                         objective=mpct_objective(ing, state.z, state.v), u0=u0, xs=xs, us=us,
                         phase_times=phase)
    return report, state

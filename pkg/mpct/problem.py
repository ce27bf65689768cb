"""
MPC-for-tracking problem data and the ADMM ingredients built from it.

Decision vector ordering (stage block n = nx + nu):

    z = (x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_s, u_s)
    v = (x_0, u_0, y_0, x_1, u_1, y_1, ..., x_s, u_s, y_s)

Bounds are stored per stage as rows of shape (N+1, nx+nu+ny); row N holds the
limits of the artificial reference (x_s, u_s, y_s). Flattening them row by row
gives exactly the v ordering.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import List

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, block_diag, cholesky

from .banded_linalg import BlockDiagonalMatrix, LowRankPair
from .errors import DimensionMismatch, InvalidBounds, InvalidParameter, NotPositiveDefinite

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PlantModel:
    """ Discrete-time plant x+ = A x + B u, y = C x + D u. """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in ('A', 'B', 'C', 'D'):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        nx, nu, ny = self.nx, self.nu, self.ny
        if self.A.shape != (nx, nx):
            raise DimensionMismatch('A must be square, got {}'.format(self.A.shape))
        if self.B.shape[0] != nx:
            raise DimensionMismatch('B has {} rows, expected {}'.format(self.B.shape[0], nx))
        if self.C.shape != (ny, nx):
            raise DimensionMismatch('C is {}, expected ({}, {})'.format(self.C.shape, ny, nx))
        if self.D.shape != (ny, nu):
            raise DimensionMismatch('D is {}, expected ({}, {})'.format(self.D.shape, ny, nu))

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    @property
    def ny(self):
        return self.C.shape[0]


@dataclass(frozen=True, eq=False)
class Weights:
    """ Stage weights Q, R and offset-cost weights T, S. """
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        for name in ('Q', 'R', 'T', 'S'):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))


class BoundKind(IntEnum):
    FREE = 0
    HARD = 1
    SOFT = 2


@dataclass(frozen=True)
class BoundMode:
    """
    How one component of v is constrained.

    Parameters
    ----------
    kind : BoundKind
        FREE (bounds ignored), HARD (box projection) or SOFT (exact penalty)
    weight : float
        penalty weight beta_j, only meaningful for SOFT
    """
    kind: BoundKind
    weight: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise InvalidParameter('beta', 'soft weight must be finite and >= 0, got {}'.format(self.weight))

    @classmethod
    def hard(cls):
        return cls(BoundKind.HARD)

    @classmethod
    def soft(cls, weight):
        return cls(BoundKind.SOFT, float(weight))

    @classmethod
    def free(cls):
        return cls(BoundKind.FREE)


@dataclass(frozen=True, eq=False)
class StageBounds:
    """
    Per-stage box limits and constraint modes.

    Parameters
    ----------
    lower, upper : 2-D arrays, shape (N+1, nx+nu+ny)
        row i < N holds (x_i, u_i, y_i) limits, row N holds (x_s, u_s, y_s);
        +-inf means unbounded. Row 0's x limits are never used (x_0 is fixed
        by the initial-condition equality).
    kind : 2-D int array, same shape
        BoundKind per component
    weight : 2-D array, same shape
        beta per component (used where kind is SOFT)
    """
    lower: np.ndarray
    upper: np.ndarray
    kind: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
        shape = lower.shape
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', np.broadcast_to(np.asarray(self.upper, dtype=float), shape).copy())
        object.__setattr__(self, 'kind', np.broadcast_to(np.asarray(self.kind, dtype=np.int8), shape).copy())
        object.__setattr__(self, 'weight', np.broadcast_to(np.asarray(self.weight, dtype=float), shape).copy())

    @classmethod
    def constant(cls, horizon, nx, nu, ny, x=(None, None), u=(None, None), y=(None, None),
                 xs=None, us=None, ys=None, mode=BoundMode.hard()):
        """
        Same limits at every stage. Each of x, u, y (and the optional
        artificial-reference overrides xs, us, ys) is a (lower, upper) pair;
        None stands for unbounded.
        """
        def fill(pair, dim):
            lo, hi = pair
            lo = np.full(dim, -np.inf) if lo is None else np.broadcast_to(np.asarray(lo, dtype=float), (dim,))
            hi = np.full(dim, np.inf) if hi is None else np.broadcast_to(np.asarray(hi, dtype=float), (dim,))
            return lo, hi

        stage_lo, stage_hi = zip(fill(x, nx), fill(u, nu), fill(y, ny))
        lower = np.tile(np.concatenate(stage_lo), (horizon + 1, 1))
        upper = np.tile(np.concatenate(stage_hi), (horizon + 1, 1))
        offset = 0
        for pair, dim in ((xs, nx), (us, nu), (ys, ny)):
            if pair is not None:
                lower[horizon, offset:offset + dim], upper[horizon, offset:offset + dim] = fill(pair, dim)
            offset += dim
        return cls(lower, upper, int(mode.kind), mode.weight)

    @property
    def horizon(self):
        return self.lower.shape[0] - 1

    def with_mode(self, mode: BoundMode, rows=slice(None), columns=slice(None)):
        """ Copy with `mode` applied to the selected stage rows / components. """
        kind, weight = self.kind.copy(), self.weight.copy()
        kind[rows, columns] = int(mode.kind)
        weight[rows, columns] = mode.weight
        return dataclasses.replace(self, kind=kind, weight=weight)

    def mode_at(self, stage, component):
        return BoundMode(BoundKind(int(self.kind[stage, component])), float(self.weight[stage, component]))


@dataclass(frozen=True, eq=False)
class ProblemData:
    """
    Everything defining one soft/hard MPCT problem except the current state
    and the reference.
    """
    model: PlantModel
    weights: Weights
    horizon: int
    bounds: StageBounds
    rho: float = 1.2
    eps_p: float = 1e-4
    eps_d: float = 1e-4
    max_iterations: int = 5000

    @property
    def nx(self):
        return self.model.nx

    @property
    def nu(self):
        return self.model.nu

    @property
    def ny(self):
        return self.model.ny

    @property
    def n_z(self):
        return (self.horizon + 1) * (self.nx + self.nu)

    @property
    def n_v(self):
        return (self.horizon + 1) * (self.nx + self.nu + self.ny)

    @property
    def n_lambda(self):
        return self.n_v

    @property
    def m_z(self):
        return (self.horizon + 2) * self.nx


@dataclass(frozen=True, eq=False)
class ReferencePair:
    x_r: np.ndarray
    u_r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'x_r', np.atleast_1d(np.asarray(self.x_r, dtype=float)))
        object.__setattr__(self, 'u_r', np.atleast_1d(np.asarray(self.u_r, dtype=float)))


@dataclass(frozen=True, eq=False)
class StackedBounds:
    """ v-ordered limits (v_upper, v_lower) with per-component modes. """
    upper: np.ndarray
    lower: np.ndarray
    kind: np.ndarray
    beta: np.ndarray

    @cached_property
    def free_index(self):
        return np.flatnonzero(self.kind == BoundKind.FREE)

    @cached_property
    def hard_index(self):
        return np.flatnonzero(self.kind == BoundKind.HARD)

    @cached_property
    def soft_index(self):
        return np.flatnonzero(self.kind == BoundKind.SOFT)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    field: str
    message: str = ''

    def __str__(self):
        return '{}({}): {}'.format(self.code, self.field, self.message) if self.message \
            else '{}({})'.format(self.code, self.field)


@dataclass(frozen=True, eq=False)
class Ingredients:
    """
    The QP of one problem in ADMM form: f(z) = 1/2 z'Hz + q'z + I(Gz = b),
    g(v) = gamma_beta(v_t) + I(u_0 box), coupling E z - v = 0.

    H is kept implicit: Gamma_hat + U_hat V_hat - rho E'E.
    """
    problem: ProblemData
    reference: ReferencePair
    E_hat: np.ndarray
    E: sparse.csr_matrix = field(repr=False)
    G: sparse.csr_matrix = field(repr=False)
    G_blocks: tuple = field(repr=False)
    gamma_hat: BlockDiagonalMatrix = field(repr=False)
    low_rank: LowRankPair = field(repr=False)
    q: np.ndarray = field(repr=False)
    bounds: StackedBounds = field(repr=False)
    b_template: np.ndarray = field(repr=False)

    @property
    def stage_dim(self):
        return self.problem.nx + self.problem.nu

    @cached_property
    def stage_weight(self):
        w = self.problem.weights
        return block_diag(w.Q, w.R)

    @cached_property
    def terminal_weight(self):
        w, N = self.problem.weights, self.problem.horizon
        return block_diag(N * w.Q + w.T, N * w.R + w.S)

    def apply_H(self, z):
        """ H z using the stage structure of the cost (no dense H). """
        N, n = self.problem.horizon, self.stage_dim
        Z = np.asarray(z, dtype=float).reshape(N + 1, n)
        Dg = self.stage_weight
        out = np.empty_like(Z)
        out[:N] = Z[:N] @ Dg - Z[N] @ Dg
        out[N] = Z[N] @ self.terminal_weight - Z[:N].sum(axis=0) @ Dg
        return out.reshape(-1)

    def dense_H(self):
        N, n = self.problem.horizon, self.stage_dim
        H = np.kron(np.eye(N + 1), self.stage_weight)
        H[N * n:, N * n:] = self.terminal_weight
        coupling = -np.kron(np.ones((N, 1)), self.stage_weight)
        H[:N * n, N * n:] = coupling
        H[N * n:, :N * n] = coupling.T
        return H

    def with_reference(self, reference):
        """ Same ingredients for another (x_r, u_r); only q changes. """
        return dataclasses.replace(self, reference=reference, q=_linear_cost(self.problem, reference))


def stage_coupling_blocks(model: PlantModel, horizon):
    """
    Block rows of the equality matrix G as ((stage, block), ...) tuples.

    Row 0 fixes x_0, rows 1..N-1 are the dynamics, row N couples the last
    predicted stage into x_s and row N+1 makes (x_s, u_s) a steady state.
    """
    nx, nu = model.nx, model.nu
    first = np.hstack([np.eye(nx), np.zeros((nx, nu))])
    step = np.hstack([model.A, model.B])
    advance = np.hstack([-np.eye(nx), np.zeros((nx, nu))])
    steady = np.hstack([model.A - np.eye(nx), model.B])
    rows = [((0, first),)]
    for r in range(1, horizon + 1):
        rows.append(((r - 1, step), (r, advance)))
    rows.append(((horizon, steady),))
    return tuple(rows)


def _check_weights(weights: Weights, nx, nu):
    for name, dim in (('Q', nx), ('R', nu), ('T', nx), ('S', nu)):
        M = getattr(weights, name)
        if M.shape != (dim, dim):
            yield Diagnostic('DimensionMismatch', name, 'expected {}x{}, got {}'.format(dim, dim, M.shape))
            continue
        if not np.allclose(M, M.T, rtol=1e-12, atol=1e-14):
            yield Diagnostic('NotPositiveDefinite', name, 'not symmetric')
            continue
        try:
            L = cholesky(M, lower=True)
        except LinAlgError:
            yield Diagnostic('NotPositiveDefinite', name)
            continue
        if np.min(np.diag(L)) ** 2 <= 1e-14 * np.max(np.diag(M)):
            yield Diagnostic('NotPositiveDefinite', name)


def _component_label(stage, column, p: ProblemData):
    nx, nu = p.nx, p.nu
    var = 'x' if column < nx else 'u' if column < nx + nu else 'y'
    return var + ('s' if stage == p.horizon else str(stage))


def _bound_diagnostics(p: ProblemData):
    b = p.bounds
    shape = (p.horizon + 1, p.nx + p.nu + p.ny)
    if b.lower.shape != shape:
        yield Diagnostic('DimensionMismatch', 'bounds', 'expected {}, got {}'.format(shape, b.lower.shape))
        return
    active = b.kind != BoundKind.FREE
    active[0, :p.nx] = False
    active[0, p.nx:p.nx + p.nu] = True
    seen = set()
    for stage, column in zip(*np.nonzero(active & (b.lower >= b.upper))):
        label = _component_label(stage, column, p)
        if label not in seen:
            seen.add(label)
            yield Diagnostic('InvalidBounds', label, 'lower >= upper')
    soft = b.kind == BoundKind.SOFT
    if np.any(~np.isfinite(b.weight[soft])) or np.any(b.weight[soft] < 0):
        yield Diagnostic('InvalidParameter', 'beta', 'soft weights must be finite and >= 0')


def validate(p: ProblemData) -> List[Diagnostic]:
    """
    Check every ProblemData invariant.

    Returns
    -------
    list of Diagnostic
        empty when the problem is valid, one entry per violation otherwise
    """
    out = list(_check_weights(p.weights, p.nx, p.nu))
    out.extend(_bound_diagnostics(p))
    if p.horizon < 2:
        out.append(Diagnostic('InvalidParameter', 'N', 'horizon must be >= 2'))
    if not p.rho > 0:
        out.append(Diagnostic('InvalidParameter', 'rho', 'must be > 0'))
    if not p.eps_p > 0:
        out.append(Diagnostic('InvalidParameter', 'eps_p', 'must be > 0'))
    if not p.eps_d > 0:
        out.append(Diagnostic('InvalidParameter', 'eps_d', 'must be > 0'))
    if p.max_iterations < 1:
        out.append(Diagnostic('InvalidParameter', 'max_iter', 'must be >= 1'))
    return out


def stack_bounds(p: ProblemData) -> StackedBounds:
    """
    Stack the stage limits in v order. x_0 is always FREE and u_0 always HARD;
    every other component keeps its configured mode.
    """
    nx, nu = p.nx, p.nu
    for d in _bound_diagnostics(p):
        if d.code == 'DimensionMismatch':
            raise DimensionMismatch(d.message)
        if d.code == 'InvalidBounds':
            raise InvalidBounds(d.field)
        raise InvalidParameter(d.field, d.message)
    lower, upper = p.bounds.lower.copy(), p.bounds.upper.copy()
    kind, beta = p.bounds.kind.astype(np.int8), p.bounds.weight.copy()
    lower[0, :nx], upper[0, :nx] = -np.inf, np.inf
    kind[0, :nx] = BoundKind.FREE
    kind[0, nx:nx + nu] = BoundKind.HARD
    beta[kind != BoundKind.SOFT] = 0.0
    return StackedBounds(upper.reshape(-1), lower.reshape(-1), kind.reshape(-1), beta.reshape(-1))


def _linear_cost(p: ProblemData, ref: ReferencePair):
    if ref.x_r.shape != (p.nx,) or ref.u_r.shape != (p.nu,):
        raise DimensionMismatch('reference must be ({},) and ({},)'.format(p.nx, p.nu))
    q = np.zeros(p.n_z)
    q[-(p.nx + p.nu):] = -np.concatenate([p.weights.T @ ref.x_r, p.weights.S @ ref.u_r])
    return q


def assemble_ingredients(p: ProblemData, ref: ReferencePair) -> Ingredients:
    """
    Build G, E, q, Gamma_hat, (U_hat, V_hat) and the stacked bounds.

    Raises
    ------
    DimensionMismatch
        inconsistent plant, weight, bound or reference shapes
    NotPositiveDefinite
        one of Q, R, T, S is not SPD
    """
    model, w, N = p.model, p.weights, p.horizon
    nx, nu, ny = p.nx, p.nu, p.ny
    n = nx + nu
    for d in _check_weights(w, nx, nu):
        if d.code == 'DimensionMismatch':
            raise DimensionMismatch('{}: {}'.format(d.field, d.message))
        raise NotPositiveDefinite(d.field)
    q = _linear_cost(p, ref)

    E_hat = np.vstack([np.eye(n), np.hstack([model.C, model.D])])
    E = sparse.kron(sparse.identity(N + 1), sparse.csr_matrix(E_hat), format='csr')
    penalty = p.rho * (E_hat.T @ E_hat)

    Dg = block_diag(w.Q, w.R)
    terminal = block_diag(N * w.Q + w.T, N * w.R + w.S)
    gamma_hat = BlockDiagonalMatrix(tuple([Dg + penalty] * N + [terminal + penalty]))

    # H - blockdiag(H) = U_hat V_hat with Y = -1_N' (x) diag(Q, R)
    Y = -np.kron(np.ones((1, N)), Dg)
    U = np.block([[Y.T, np.zeros((N * n, n))], [np.zeros((n, n)), np.eye(n)]])
    V = np.block([[np.zeros((n, N * n)), np.eye(n)], [Y, np.zeros((n, n))]])
    low_rank = LowRankPair(U, V)
    _check_coupling(low_rank, Y, N, n)

    G_blocks = stage_coupling_blocks(model, N)
    grid = [[None] * (N + 1) for _ in range(N + 2)]
    for r, row in enumerate(G_blocks):
        for stage, block in row:
            grid[r][stage] = block
    G = sparse.bmat(grid, format='csr')

    ing = Ingredients(problem=p, reference=ref, E_hat=E_hat, E=E, G=G, G_blocks=G_blocks,
                      gamma_hat=gamma_hat, low_rank=low_rank, q=q, bounds=stack_bounds(p),
                      b_template=np.zeros(p.m_z))
    log.debug('assembled ingredients: n_z=%d m_z=%d n_v=%d', p.n_z, p.m_z, p.n_v)
    return ing


def _check_coupling(pair: LowRankPair, Y, N, n):
    expected = np.zeros((pair.U.shape[0],) * 2)
    expected[:N * n, N * n:] = Y.T
    expected[N * n:, :N * n] = Y
    err = np.abs(pair.U @ pair.V - expected).max()
    if err > 1e-14 * max(np.abs(Y).max(), 1.0):
        raise DimensionMismatch('low-rank pair does not reproduce the cost coupling ({:.2e})'.format(err))


def assemble_b(ing: Ingredients, x_current):
    """ b = (x(t), 0, ..., 0). """
    x_current = np.atleast_1d(np.asarray(x_current, dtype=float))
    nx = ing.problem.nx
    if x_current.shape != (nx,):
        raise DimensionMismatch('x(t) must have {} entries, got {}'.format(nx, x_current.shape))
    b = ing.b_template.copy()
    b[:nx] = x_current
    return b


def constraint_penalty(bounds: StackedBounds, v):
    """ gamma_beta: sum of beta_j * max(v_j - upper_j, lower_j - v_j, 0) over soft components. """
    idx = bounds.soft_index
    if idx.size == 0:
        return 0.0
    vs = np.asarray(v)[idx]
    with np.errstate(invalid='ignore'):
        violation = np.maximum.reduce([vs - bounds.upper[idx], bounds.lower[idx] - vs, np.zeros(idx.size)])
    return float(bounds.beta[idx] @ violation)


def mpct_objective(ing: Ingredients, z, v):
    """
    Cost minimised by the solver at (z, v):
    1/2 z'Hz + q'z + 1/2 (x_r'T x_r + u_r'S u_r) + gamma_beta(v_t).
    """
    z = np.asarray(z, dtype=float)
    w, ref = ing.problem.weights, ing.reference
    constant = 0.5 * (ref.x_r @ w.T @ ref.x_r + ref.u_r @ w.S @ ref.u_r)
    return float(0.5 * z @ ing.apply_H(z) + ing.q @ z + constant + constraint_penalty(ing.bounds, v))


def with_constraint_mode(p: ProblemData, mode, beta=None) -> ProblemData:
    """
    Switch every constraint of `p` to the hard ('hard') or the soft ('soft')
    encoding. `beta` is a scalar or an array broadcastable to the stage
    bounds; by default the soft weights already stored in `p` are kept.
    """
    b = p.bounds
    if mode == 'hard':
        # weights are kept so a later switch back to 'soft' can reuse them
        bounds = dataclasses.replace(b, kind=np.full_like(b.kind, BoundKind.HARD))
    elif mode == 'soft':
        if beta is None:
            weight = b.weight
            switched = (b.kind != BoundKind.SOFT) & (np.isfinite(b.lower) | np.isfinite(b.upper))
            if np.any(switched) and not np.any(weight[switched] > 0):
                raise InvalidParameter('beta', 'no soft weights stored for the bounded components; '
                                               'pass beta to switch to soft')
        else:
            beta = np.asarray(beta, dtype=float)
            # a flat n_v vector is accepted as well as anything broadcastable
            weight = beta.reshape(b.weight.shape) if beta.size == b.weight.size \
                else np.broadcast_to(beta, b.weight.shape)
        if np.any(~np.isfinite(weight)) or np.any(weight < 0):
            raise InvalidParameter('beta', 'soft weights must be finite and >= 0')
        bounds = dataclasses.replace(b, kind=np.full_like(b.kind, BoundKind.SOFT), weight=np.array(weight))
    else:
        raise InvalidParameter('mode', "mode must be 'soft' or 'hard', got {!r}".format(mode))
    return dataclasses.replace(p, bounds=bounds)

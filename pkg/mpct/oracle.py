"""
Slow dense reference solvers. They share no numerical kernels with the ADMM
path and are meant for tests, validation and the slack-variable benchmark row.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, eigvalsh, lu_factor, lu_solve, null_space

from .errors import DimensionMismatch, Infeasible, NotConverged
from .problem import (BoundKind, Ingredients, ProblemData, ReferencePair, assemble_b,
                      assemble_ingredients)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DenseQP:
    """
    min 1/2 w'Hw + q'w  s.t.  A_eq w = b_eq,  A_in w <= b_in

    The first `n_primary` entries of w are the variables of the original
    problem; anything after them is a slack.
    """
    H: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    n_primary: int = None
    offset: float = field(default=0.0)

    def __post_init__(self):
        n = self.q.shape[0]
        if self.H.shape != (n, n):
            raise DimensionMismatch('H is {}, expected ({}, {})'.format(self.H.shape, n, n))
        if self.A_eq.shape[1] != n or self.A_in.shape[1] != n:
            raise DimensionMismatch('constraint matrices must have {} columns'.format(n))
        if self.A_eq.shape[0] != self.b_eq.shape[0] or self.A_in.shape[0] != self.b_in.shape[0]:
            raise DimensionMismatch('constraint rows and right-hand sides differ')
        if self.n_primary is None:
            object.__setattr__(self, 'n_primary', n)

    @property
    def n(self):
        return self.q.shape[0]

    def objective(self, w):
        return float(0.5 * w @ self.H @ w + self.q @ w + self.offset)

    def is_convex(self, tol=1e-10):
        """ H is PSD on the nullspace of A_eq. """
        Z = null_space(self.A_eq) if self.A_eq.shape[0] else np.eye(self.n)
        if Z.shape[1] == 0:
            return True
        return bool(eigvalsh(Z.T @ self.H @ Z).min() >= -tol)


def _penalty_rows(bounds, Ez_map, n_z):
    """
    Inequality rows in (z, s) for the stacked bounds. Soft components with
    beta > 0 get one slack each; soft components with beta = 0 impose nothing.
    """
    soft = [j for j in bounds.soft_index if bounds.beta[j] > 0]
    slack_of = {j: k for k, j in enumerate(soft)}
    n_s = len(soft)
    rows, rhs = [], []

    def add(coef_z, rhs_value, slack=None):
        row = np.zeros(n_z + n_s)
        row[:n_z] = coef_z
        if slack is not None:
            row[n_z + slack] = -1.0
        rows.append(row)
        rhs.append(rhs_value)

    for j in range(bounds.kind.shape[0]):
        kind = bounds.kind[j]
        if kind == BoundKind.FREE or (kind == BoundKind.SOFT and j not in slack_of):
            continue
        slack = slack_of.get(j)
        if np.isfinite(bounds.upper[j]):
            add(Ez_map[j], bounds.upper[j], slack)
        if np.isfinite(bounds.lower[j]):
            add(-Ez_map[j], -bounds.lower[j], slack)
    for k in range(n_s):
        row = np.zeros(n_z + n_s)
        row[n_z + k] = -1.0
        rows.append(row)
        rhs.append(0.0)
    A_in = np.array(rows).reshape(len(rows), n_z + n_s)
    return A_in, np.array(rhs, dtype=float), np.array([bounds.beta[j] for j in soft], dtype=float)


def build_slack_qp(p: ProblemData, ref: ReferencePair, x_current, ing: Ingredients = None) -> DenseQP:
    """
    The MPCT problem in classical slack-variable form: per soft component one
    s_j >= 0 with s_j >= v_j - upper_j and s_j >= lower_j - v_j, costed beta_j s_j.
    In all-hard mode there are no slacks and this is the plain QP.
    """
    ing = ing or assemble_ingredients(p, ref)
    n_z = p.n_z
    E = ing.E.toarray()
    A_in, b_in, beta = _penalty_rows(ing.bounds, E, n_z)
    n_s = beta.shape[0]
    H = np.zeros((n_z + n_s, n_z + n_s))
    H[:n_z, :n_z] = ing.dense_H()
    q = np.concatenate([ing.q, beta])
    A_eq = np.hstack([ing.G.toarray(), np.zeros((p.m_z, n_s))])
    w = p.weights
    offset = 0.5 * (ref.x_r @ w.T @ ref.x_r + ref.u_r @ w.S @ ref.u_r)
    return DenseQP(H, q, A_eq, assemble_b(ing, x_current), A_in, b_in, n_primary=n_z, offset=offset)


def build_v_subproblem_qp(ing: Ingredients, z, lam, rho=None) -> DenseQP:
    """ The separable v-update, min g(v) - lam'v + rho/2 ||Ez - v||^2, as a slack QP in v. """
    rho = ing.problem.rho if rho is None else rho
    n_v = ing.problem.n_v
    w = ing.E @ z + np.asarray(lam) / rho
    A_in, b_in, beta = _penalty_rows(ing.bounds, np.eye(n_v), n_v)
    n_s = beta.shape[0]
    H = np.zeros((n_v + n_s, n_v + n_s))
    H[:n_v, :n_v] = rho * np.eye(n_v)
    q = np.concatenate([-rho * w, beta])
    return DenseQP(H, q, np.zeros((0, n_v + n_s)), np.zeros(0), A_in, b_in, n_primary=n_v,
                   offset=0.5 * rho * float(w @ w))


def _factor(K):
    with warnings.catch_warnings():
        warnings.simplefilter('error', LinAlgWarning)
        try:
            return lu_factor(K, check_finite=False)
        except (LinAlgError, LinAlgWarning):
            raise Infeasible('KKT matrix is singular') from None


def _max_step(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-x[neg] / dx[neg])))


def interior_point(qp: DenseQP, tol=1e-9, max_iter=200):
    """
    Mehrotra predictor-corrector on the dense KKT system.

    Returns
    -------
    (w, iterations)

    Raises
    ------
    Infeasible
        the multipliers diverge or the primal residual stalls
    NotConverged
        max_iter reached on a problem that still looks feasible
    """
    n, m_e, m_i = qp.n, qp.A_eq.shape[0], qp.A_in.shape[0]
    H, q, A, b, C, d = qp.H, qp.q, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in
    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)
    scale_b = 1.0 + np.max(np.abs(b), initial=0.0)
    scale_d = 1.0 + np.max(np.abs(d), initial=0.0)

    def kkt(diag):
        K = np.zeros((n + m_e, n + m_e))
        K[:n, :n] = H + (C.T * diag) @ C
        K[:n, n:] = A.T
        K[n:, :n] = A
        return _factor(K)

    if m_i == 0:
        lu = kkt(np.zeros(0))
        sol = lu_solve(lu, np.concatenate([-q, b]))
        return sol[:n], 1

    x = np.zeros(n)
    y = np.zeros(m_e)
    s = np.maximum(d - C @ x, 1.0)
    lam = np.ones(m_i)
    for it in range(1, max_iter + 1):
        r_dual = H @ x + q + A.T @ y + C.T @ lam
        r_eq = A @ x - b
        r_in = C @ x + s - d
        mu = float(s @ lam) / m_i
        if (np.max(np.abs(r_dual)) <= tol * scale_q and np.max(np.abs(r_eq), initial=0.0) <= tol * scale_b
                and np.max(np.abs(r_in)) <= tol * scale_d and mu <= tol):
            return x, it - 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))) \
                or np.max(lam) > 1e12 or np.max(np.abs(x)) > 1e12:
            raise Infeasible('multipliers diverged after {} interior-point iterations'.format(it))

        ratio = lam / s
        lu = kkt(ratio)

        def direction(r_comp):
            rhs_x = -r_dual - C.T @ (ratio * r_in - r_comp / s)
            sol = lu_solve(lu, np.concatenate([rhs_x, -r_eq]))
            dx, dy = sol[:n], sol[n:]
            dlam = ratio * (C @ dx + r_in) - r_comp / s
            ds = -r_in - C @ dx
            return dx, dy, ds, dlam

        # predictor
        dx, dy, ds, dlam = direction(s * lam)
        a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / m_i
        sigma = (mu_aff / mu) ** 3
        # corrector
        dx, dy, ds, dlam = direction(s * lam + ds * dlam - sigma * mu)
        step = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dlam)))
        x, y, s, lam = x + step * dx, y + step * dy, s + step * ds, lam + step * dlam

    primal = max(np.max(np.abs(A @ x - b), initial=0.0), np.max(np.maximum(C @ x - d, 0.0)))
    if primal > np.sqrt(tol) * max(scale_b, scale_d):
        raise Infeasible('primal residual {:.2e} after {} interior-point iterations'.format(primal, max_iter))
    raise NotConverged(tol)


def solve_dense_qp(qp: DenseQP, tol=1e-9):
    """ Minimiser of `qp` (all variables, slacks included). """
    w, iterations = interior_point(qp, tol=tol)
    log.debug('dense QP (n=%d) solved in %d interior-point iterations', qp.n, iterations)
    return w


def _relaxed_h(y, b, c, d, alpha):
    with np.errstate(invalid='ignore'):
        violation = np.maximum(np.maximum(c - y, y - d), 0.0)
    return 0.5 * (y - b) ** 2 + alpha * violation


def grid_prox_oracle(b, c, d, alpha, grid=257, chunk=4096):
    """
    Brute-force argmin of 1/2 (y - b)^2 + alpha max(c - y, y - d, 0).

    A grid over [min(b, c) - 2 alpha - 1, max(b, d) + 2 alpha + 1] brackets the
    minimiser, then bisection on the sign of the right derivative
    y - b + alpha * s(y) (s = -1 left of c, +1 from d on, 0 between) pins it
    down to machine precision. Scalars or broadcastable arrays.
    """
    b, c, d, alpha = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (b, c, d, alpha)))
    shape = b.shape
    b, c, d, alpha = (a.reshape(-1) for a in (b, c, d, alpha))
    out = np.empty_like(b)
    steps = np.linspace(0.0, 1.0, grid)
    for start in range(0, b.size, chunk):
        sl = slice(start, start + chunk)
        bb, cc, dd, aa = b[sl], c[sl], d[sl], alpha[sl]
        lo = np.minimum(bb, np.where(np.isfinite(cc), cc, bb)) - 2 * aa - 1
        hi = np.maximum(bb, np.where(np.isfinite(dd), dd, bb)) + 2 * aa + 1
        ys = lo[:, None] + (hi - lo)[:, None] * steps[None, :]
        values = _relaxed_h(ys, bb[:, None], cc[:, None], dd[:, None], aa[:, None])
        best = np.argmin(values, axis=1)
        rows = np.arange(bb.size)
        left = ys[rows, np.maximum(best - 1, 0)]
        right = ys[rows, np.minimum(best + 1, grid - 1)]
        for _ in range(80):
            mid = 0.5 * (left + right)
            slope = mid - bb + aa * np.where(mid < cc, -1.0, np.where(mid >= dd, 1.0, 0.0))
            up = slope >= 0
            right = np.where(up, mid, right)
            left = np.where(up, left, mid)
        out[sl] = 0.5 * (left + right)
    return out.reshape(shape) if shape else float(out[0])

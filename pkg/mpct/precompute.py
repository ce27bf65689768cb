"""
Offline factorization of the z-update systems.

    P = Gamma_hat + U_hat V_hat          (n_z x n_z)
    W = G P^{-1} G' = Gamma_tilde + U_tilde V_tilde   (m_z x m_z)

Gamma_hat is block diagonal, Gamma_tilde = G Gamma_hat^{-1} G' is banded (G only
couples neighbouring stages), and both corrections have rank 2(nx+nu). After
build_cache every solve is block/banded substitution plus one small dense LU
solve.
"""
import hashlib
import logging
import os
import pickle
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

from .banded_linalg import (BandedMatrix, BlockDiagonalMatrix, LowRankPair, SmallDenseFactor,
                            cholesky_banded, cholesky_block_diagonal, solve_block_diagonal,
                            solve_semibanded, solve_triangular_banded)
from .errors import DimensionMismatch, MPCTError, NotPositiveDefinite
from .problem import Ingredients, ProblemData

log = logging.getLogger(__name__)

CACHE_FORMAT = 'mpct-factor-cache'
CACHE_VERSION = 1


def cache_key(problem: ProblemData):
    """
    Fingerprint of everything the factors depend on: A, B, C, D, Q, R, T, S,
    N and rho. Bounds, beta, references and x(t) are not part of it.
    """
    h = hashlib.sha256()
    m, w = problem.model, problem.weights
    for M in (m.A, m.B, m.C, m.D, w.Q, w.R, w.T, w.S):
        h.update(repr(M.shape).encode())
        h.update(np.ascontiguousarray(M, dtype=float).tobytes())
    h.update('N={};rho={!r}'.format(problem.horizon, float(problem.rho)).encode())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class FactorCache:
    """
    Factors of P and W. Immutable once built and safe to share between
    solvers running in different threads.
    """
    key: str
    chol_gamma_hat: BlockDiagonalMatrix = field(repr=False)
    gamma_tilde: BandedMatrix = field(repr=False)
    chol_gamma_tilde: BandedMatrix = field(repr=False)
    hat: LowRankPair = field(repr=False)
    small_hat: SmallDenseFactor = field(repr=False)
    tilde: LowRankPair = field(repr=False)
    small_tilde: SmallDenseFactor = field(repr=False)
    gamma_hat_inv_U: np.ndarray = field(repr=False)
    gamma_tilde_inv_U: np.ndarray = field(repr=False)

    @property
    def n_z(self):
        return self.chol_gamma_hat.total_dim

    @property
    def m_z(self):
        return self.gamma_tilde.dim

    def gamma_hat_solve(self, r):
        return solve_block_diagonal(self.chol_gamma_hat, r)

    def gamma_tilde_solve(self, r):
        return _banded_cholesky_solve(self.chol_gamma_tilde, r)

    def is_valid_for(self, problem: ProblemData):
        return self.key == cache_key(problem)

    def save(self, path):
        with open(path, 'wb') as f:
            pickle.dump({'format': CACHE_FORMAT, 'version': CACHE_VERSION,
                         'key': self.key, 'cache': self}, f)


def load_cache(path, problem: ProblemData = None):
    """
    Read a cache written by FactorCache.save.

    Returns None when `problem` is given and the cache was built for different
    factor inputs, so the caller rebuilds.
    """
    with open(path, 'rb') as f:
        payload = pickle.load(f)
    if not isinstance(payload, dict) or payload.get('format') != CACHE_FORMAT:
        raise MPCTError('{} is not a factor cache'.format(path))
    if payload.get('version') != CACHE_VERSION:
        raise MPCTError('unsupported factor cache version {!r}'.format(payload.get('version')))
    cache = payload['cache']
    if problem is not None and payload['key'] != cache_key(problem):
        log.info('factor cache %s does not match the problem, ignoring it', path)
        return None
    return cache


def _banded_cholesky_solve(L: BandedMatrix, r):
    y = solve_triangular_banded(L, r, side='lower')
    return solve_triangular_banded(L, y, side='upper')


def _add_block(entries, upper_bw, row0, col0, block):
    ii, jj = np.indices(block.shape)
    entries[upper_bw + row0 + ii - col0 - jj, col0 + jj] += block


def assemble_gamma_tilde(ing: Ingredients, chol_gamma_hat: BlockDiagonalMatrix) -> BandedMatrix:
    """
    G Gamma_hat^{-1} G' from G's stage blocks, written straight into band
    storage. Rows r and s of G share a stage only when |r - s| <= 1, so the
    result is block tridiagonal with bandwidth 2 nx - 1.
    """
    p = ing.problem
    nx, N = p.nx, p.horizon
    bw = 2 * nx - 1
    entries = np.zeros((2 * bw + 1, p.m_z))
    touching = [[] for _ in range(N + 1)]
    for r, row in enumerate(ing.G_blocks):
        for stage, block in row:
            touching[stage].append((r, block))
    for stage, rows in enumerate(touching):
        L = chol_gamma_hat.blocks[stage]
        inv_Bs = {s: cho_solve((L, True), Bs.T) for s, Bs in rows}
        for r, Br in rows:
            for s, _ in rows:
                _add_block(entries, bw, r * nx, s * nx, Br @ inv_Bs[s])
    return BandedMatrix(p.m_z, bw, bw, entries)


def _spot_check(ing: Ingredients, cache: FactorCache):
    # dense SPD check of P and W for small horizons
    P = ing.gamma_hat.to_dense() + ing.low_rank.U @ ing.low_rank.V
    W = cache.gamma_tilde.to_dense() + cache.tilde.U @ cache.tilde.V
    for name, M in (('P', P), ('W', W)):
        try:
            cholesky(0.5 * (M + M.T), lower=True)
        except LinAlgError:
            raise NotPositiveDefinite(name)


def build_cache(ing: Ingredients) -> FactorCache:
    """
    Factor P and W for one problem.

    Raises
    ------
    NotPositiveDefinite
        Gamma_hat or Gamma_tilde (or, for N <= 3, P or W) is not SPD
    SingularSmallSystem
        one of the rank-2(nx+nu) capacitance matrices is singular
    """
    p = ing.problem
    chol_hat = cholesky_block_diagonal(ing.gamma_hat)
    U_hat, V_hat = ing.low_rank.U, ing.low_rank.V
    rank = ing.low_rank.rank

    gamma_hat_inv_U = solve_block_diagonal(chol_hat, U_hat)
    small_hat = SmallDenseFactor.factor(np.eye(rank) + V_hat @ gamma_hat_inv_U)

    gamma_tilde = assemble_gamma_tilde(ing, chol_hat)
    chol_tilde = cholesky_banded(gamma_tilde)

    # U_tilde = -G Gamma_hat^{-1} U_hat (I + V_hat Gamma_hat^{-1} U_hat)^{-1}
    G_gamma_inv_U = np.asarray(ing.G @ gamma_hat_inv_U)
    U_tilde = -small_hat.solve(G_gamma_inv_U.T, transpose=True).T
    # V_tilde = V_hat Gamma_hat^{-1} G'
    V_tilde = np.asarray(ing.G @ solve_block_diagonal(chol_hat, V_hat.T)).T
    tilde = LowRankPair(U_tilde, V_tilde)
    gamma_tilde_inv_U = _banded_cholesky_solve(chol_tilde, U_tilde)
    small_tilde = SmallDenseFactor.factor(np.eye(rank) + V_tilde @ gamma_tilde_inv_U)

    cache = FactorCache(key=cache_key(p), chol_gamma_hat=chol_hat, gamma_tilde=gamma_tilde,
                        chol_gamma_tilde=chol_tilde, hat=ing.low_rank, small_hat=small_hat,
                        tilde=tilde, small_tilde=small_tilde, gamma_hat_inv_U=gamma_hat_inv_U,
                        gamma_tilde_inv_U=gamma_tilde_inv_U)
    if p.horizon <= 3:
        _spot_check(ing, cache)
    log.info('factor cache built: n_z=%d, m_z=%d, bandwidth=%d, rank=%d',
             p.n_z, p.m_z, gamma_tilde.lower_bandwidth, rank)
    return cache


def cached_build(ing: Ingredients, cache_dir=None) -> FactorCache:
    """ build_cache, reusing (and refreshing) a dump in `cache_dir` when given. """
    if not cache_dir:
        return build_cache(ing)
    path = os.path.join(cache_dir, cache_key(ing.problem) + '.pkl')
    if os.path.exists(path):
        cache = load_cache(path, ing.problem)
        if cache is not None:
            log.info('loaded factor cache %s', path)
            return cache
    cache = build_cache(ing)
    os.makedirs(cache_dir, exist_ok=True)
    cache.save(path)
    return cache


def solve_P(cache: FactorCache, d):
    """ P^{-1} d. """
    d = np.asarray(d, dtype=float)
    if d.shape != (cache.n_z,):
        raise DimensionMismatch('expected a vector of {} entries, got {}'.format(cache.n_z, d.shape))
    return solve_semibanded(cache.gamma_hat_solve, cache.hat.U, cache.hat.V, cache.small_hat, d,
                            gamma_inv_U=cache.gamma_hat_inv_U)


def solve_W(cache: FactorCache, d):
    """ W^{-1} d. """
    d = np.asarray(d, dtype=float)
    if d.shape != (cache.m_z,):
        raise DimensionMismatch('expected a vector of {} entries, got {}'.format(cache.m_z, d.shape))
    return solve_semibanded(cache.gamma_tilde_solve, cache.tilde.U, cache.tilde.V, cache.small_tilde, d,
                            gamma_inv_U=cache.gamma_tilde_inv_U)

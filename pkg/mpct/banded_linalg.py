"""
Structured linear algebra for the semi-banded KKT solves.

Storage conventions
-------------------
BlockDiagonalMatrix keeps its square blocks in order. BandedMatrix keeps its
band in the diagonal-major layout of :func:`scipy.linalg.solve_banded`:
``entries[u + i - j, j] == M[i, j]`` for ``-l <= j - i <= u``, zero padded at
the band edges. A lower Cholesky factor is therefore a BandedMatrix with
``upper_bandwidth == 0`` whose ``entries[0]`` is the diagonal.
"""
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.linalg import (LinAlgError, LinAlgWarning, cho_solve, cholesky,
                          get_lapack_funcs, lu_factor, lu_solve, solve_banded,
                          solve_triangular)

from .errors import DimensionMismatch, NotPositiveDefinite, SingularSmallSystem

# Relative pivot threshold below which a Cholesky pivot counts as breakdown.
PIVOT_TOL = 1e-14
# Relative mismatch allowed between the upper and lower halves of a band.
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class BlockDiagonalMatrix:
    """
    Block-diagonal matrix diag(M_1, ..., M_k) with square, possibly unequal,
    dense blocks.

    Parameters
    ----------
    blocks : sequence of 2-D arrays
        diagonal blocks, in order
    lower : bool
        True when the blocks are lower Cholesky factors rather than the
        matrix itself
    """
    blocks: tuple
    lower: bool = False

    def __post_init__(self):
        blocks = tuple(np.array(b, dtype=float, ndmin=2) for b in self.blocks)
        for i, b in enumerate(blocks):
            if b.shape[0] != b.shape[1]:
                raise DimensionMismatch('block {} is not square: {}'.format(i, b.shape))
        object.__setattr__(self, 'blocks', blocks)

    @property
    def sizes(self):
        return [b.shape[0] for b in self.blocks]

    @property
    def total_dim(self):
        return int(sum(self.sizes))

    @property
    def uniform(self):
        return len(set(self.sizes)) == 1

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @cached_property
    def _stacked_inverse_factors(self):
        # L_k^{-1} for every block, stacked; only built for uniform factors
        eye = np.eye(self.blocks[0].shape[0])
        return np.stack([solve_triangular(b, eye, lower=True, check_finite=False)
                         for b in self.blocks])

    def to_dense(self):
        out = np.zeros((self.total_dim, self.total_dim))
        for b, o in zip(self.blocks, self.offsets):
            out[o:o + b.shape[0], o:o + b.shape[0]] = b
        return out

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.total_dim:
            raise DimensionMismatch('expected {} rows, got {}'.format(self.total_dim, x.shape[0]))
        out = np.empty_like(x)
        for b, o in zip(self.blocks, self.offsets):
            out[o:o + b.shape[0]] = b @ x[o:o + b.shape[0]]
        return out


@dataclass(frozen=True, eq=False)
class BandedMatrix:
    """
    Square banded matrix in diagonal-major band storage.

    Parameters
    ----------
    dim : int
        matrix dimension
    lower_bandwidth, upper_bandwidth : int
        number of sub- and super-diagonals kept
    entries : 2-D array, shape (lower_bandwidth + upper_bandwidth + 1, dim)
        band storage, ``entries[u + i - j, j] = M[i, j]``
    """
    dim: int
    lower_bandwidth: int
    upper_bandwidth: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim < 1 or self.lower_bandwidth < 0 or self.upper_bandwidth < 0:
            raise DimensionMismatch('invalid band shape')
        expected = (self.lower_bandwidth + self.upper_bandwidth + 1, self.dim)
        entries = np.asarray(self.entries, dtype=float)
        if entries.shape != expected:
            raise DimensionMismatch('band storage has shape {}, expected {}'.format(entries.shape, expected))
        object.__setattr__(self, 'entries', entries)

    @classmethod
    def from_dense(cls, M, lower_bandwidth, upper_bandwidth):
        M = np.asarray(M, dtype=float)
        n = M.shape[0]
        u = upper_bandwidth
        ab = np.zeros((lower_bandwidth + u + 1, n))
        for r in range(ab.shape[0]):
            offset = r - u          # i - j for this storage row
            j = np.arange(max(0, -offset), min(n, n - offset))
            ab[r, j] = M[j + offset, j]
        return cls(n, lower_bandwidth, u, ab)

    def to_dense(self):
        n, u = self.dim, self.upper_bandwidth
        out = np.zeros((n, n))
        for r in range(self.entries.shape[0]):
            offset = r - u
            j = np.arange(max(0, -offset), min(n, n - offset))
            out[j + offset, j] = self.entries[r, j]
        return out

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise DimensionMismatch('expected {} rows, got {}'.format(self.dim, x.shape[0]))
        n, u = self.dim, self.upper_bandwidth
        out = np.zeros_like(x)
        for r in range(self.entries.shape[0]):
            offset = r - u
            j = np.arange(max(0, -offset), min(n, n - offset))
            if x.ndim == 1:
                out[j + offset] += self.entries[r, j] * x[j]
            else:
                out[j + offset] += self.entries[r, j][:, None] * x[j]
        return out

    def transposed_storage(self):
        """ Band storage of M^T (bandwidths swapped). """
        n, l, u = self.dim, self.lower_bandwidth, self.upper_bandwidth
        out = np.zeros_like(self.entries)
        for r in range(self.entries.shape[0]):
            offset = r - u          # entries of M with i - j = offset
            j = np.arange(max(0, -offset), min(n, n - offset))
            # M^T[j, j + offset] = M[j + offset, j]; row in transposed layout is l - offset
            out[l - offset, j + offset] = self.entries[r, j]
        return out


@dataclass(frozen=True, eq=False)
class LowRankPair:
    """ Low-rank correction U V with U (n x m) and V (m x n). """
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if U.shape[1] != V.shape[0] or U.shape[0] != V.shape[1]:
            raise DimensionMismatch('U is {}, V is {}'.format(U.shape, V.shape))
        object.__setattr__(self, 'U', U)
        object.__setattr__(self, 'V', V)

    @property
    def rank(self):
        return self.U.shape[1]

    def apply(self, x):
        return self.U @ (self.V @ x)


@dataclass(frozen=True, eq=False)
class SmallDenseFactor:
    """
    Partial-pivoting LU factor of a small dense matrix, e.g. I + V Gamma^-1 U.
    Build it with :meth:`factor`.
    """
    dim: int
    lu: np.ndarray = field(repr=False)
    piv: np.ndarray = field(repr=False)

    @classmethod
    def factor(cls, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise DimensionMismatch('small system is not square: {}'.format(M.shape))
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', LinAlgWarning)
            lu, piv = lu_factor(M, check_finite=False)
        diag = np.abs(np.diag(lu))
        scale = max(np.abs(M).max(), 1.0)
        if not np.all(np.isfinite(lu)) or diag.min() <= np.finfo(float).eps * M.shape[0] * scale:
            raise SingularSmallSystem('small system of dimension {} is singular'.format(M.shape[0]))
        return cls(M.shape[0], lu, piv)

    def solve(self, rhs, transpose=False):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.dim:
            raise DimensionMismatch('expected {} rows, got {}'.format(self.dim, rhs.shape[0]))
        return lu_solve((self.lu, self.piv), rhs, trans=1 if transpose else 0, check_finite=False)


def cholesky_block_diagonal(M: BlockDiagonalMatrix) -> BlockDiagonalMatrix:
    """
    Per-block lower Cholesky factors of a block-diagonal SPD matrix.

    Raises NotPositiveDefinite(block_index) when a block is not symmetric or a
    pivot falls below PIVOT_TOL times the block's largest diagonal entry.
    """
    factors = []
    for i, block in enumerate(M.blocks):
        if not np.allclose(block, block.T, rtol=1e-12, atol=1e-14 * max(np.abs(block).max(), 1.0)):
            raise NotPositiveDefinite(i, 'block {} is not symmetric'.format(i))
        try:
            L = cholesky(block, lower=True, check_finite=False)
        except LinAlgError:
            raise NotPositiveDefinite(i) from None
        if np.min(np.diag(L)) ** 2 <= PIVOT_TOL * np.max(np.diag(block)):
            raise NotPositiveDefinite(i)
        factors.append(L)
    return BlockDiagonalMatrix(tuple(factors), lower=True)


def solve_block_diagonal(L: BlockDiagonalMatrix, d):
    """
    Solve M x = d given the per-block Cholesky factors L of M. `d` may hold
    several right-hand sides as columns.
    """
    d = np.asarray(d, dtype=float)
    if d.shape[0] != L.total_dim:
        raise DimensionMismatch('expected {} rows, got {}'.format(L.total_dim, d.shape[0]))
    if L.uniform:
        Linv = L._stacked_inverse_factors
        k, b = Linv.shape[0], Linv.shape[1]
        if d.ndim == 1:
            y = np.einsum('kij,kj->ki', Linv, d.reshape(k, b))
            return np.einsum('kji,kj->ki', Linv, y).reshape(-1)
        y = np.einsum('kij,kjm->kim', Linv, d.reshape(k, b, -1))
        return np.einsum('kji,kjm->kim', Linv, y).reshape(d.shape)
    out = np.empty_like(d)
    for block, o in zip(L.blocks, L.offsets):
        sl = slice(o, o + block.shape[0])
        out[sl] = cho_solve((block, True), d[sl], check_finite=False)
    return out


def cholesky_banded(M: BandedMatrix) -> BandedMatrix:
    """
    Banded Cholesky factor L (lower, same lower bandwidth) with L L^T = M.
    No pivoting; raises NotPositiveDefinite(row_index) on breakdown and
    NotPositiveDefinite('symmetry') when the two halves of the band differ,
    since only the lower half is handed to LAPACK.
    """
    if M.lower_bandwidth != M.upper_bandwidth:
        raise DimensionMismatch('symmetric banded matrix needs equal bandwidths')
    scale = max(float(np.max(np.abs(M.entries))), 1.0)
    if not np.allclose(M.transposed_storage(), M.entries, rtol=SYMMETRY_TOL, atol=SYMMETRY_TOL * scale):
        raise NotPositiveDefinite('symmetry', 'banded matrix is not symmetric')
    l = M.lower_bandwidth
    lower = np.ascontiguousarray(M.entries[M.upper_bandwidth:])
    pbtrf, = get_lapack_funcs(('pbtrf',), (lower,))
    c, info = pbtrf(lower, lower=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise DimensionMismatch('illegal argument {} to pbtrf'.format(-info))
    pivots = c[0] ** 2
    bad = np.nonzero(pivots <= PIVOT_TOL * np.max(lower[0]))[0]
    if bad.size:
        raise NotPositiveDefinite(int(bad[0]))
    # pbtrf leaves the padding at the bottom-right of the band untouched
    for r in range(1, l + 1):
        c[r, M.dim - r:] = 0.0
    return BandedMatrix(M.dim, l, 0, c)


def solve_triangular_banded(L: BandedMatrix, d, side='lower'):
    """
    Forward (``side='lower'``, L y = d) or back (``side='upper'``, L^T y = d)
    substitution with a banded lower-triangular factor.
    """
    d = np.asarray(d, dtype=float)
    if d.shape[0] != L.dim:
        raise DimensionMismatch('expected {} rows, got {}'.format(L.dim, d.shape[0]))
    if L.upper_bandwidth != 0:
        raise DimensionMismatch('factor must be lower triangular')
    l = L.lower_bandwidth
    if side == 'lower':
        return solve_banded((l, 0), L.entries, d, check_finite=False)
    if side == 'upper':
        return solve_banded((0, l), L.transposed_storage(), d, check_finite=False)
    raise ValueError("side must be 'lower' or 'upper', got {!r}".format(side))


def solve_semibanded(gamma_solve: Callable, U, V, small: SmallDenseFactor, d,
                     gamma_inv_U: Optional[np.ndarray] = None):
    """
    Solve (Gamma + U V) z = d with the Woodbury identity.

    Parameters
    ----------
    gamma_solve : callable
        r -> Gamma^{-1} r
    U, V : 2-D arrays
        low-rank correction, U is (n x m) and V is (m x n)
    small : SmallDenseFactor
        factor of I + V Gamma^{-1} U
    d : 1-D array
        right-hand side
    gamma_inv_U : 2-D array, optional
        precomputed Gamma^{-1} U; replaces the third Gamma solve

    Returns
    -------
    1-D array
        z1 - z3 with Gamma z1 = d, (I + V Gamma^{-1} U) z2 = V z1, Gamma z3 = U z2
    """
    d = np.asarray(d, dtype=float)
    if U.shape[0] != d.shape[0] or V.shape[1] != d.shape[0] or small.dim != U.shape[1]:
        raise DimensionMismatch('U {}, V {}, small {} against rhs {}'.format(
            U.shape, V.shape, small.dim, d.shape))
    z1 = gamma_solve(d)
    z2 = small.solve(V @ z1)
    z3 = gamma_inv_U @ z2 if gamma_inv_U is not None else gamma_solve(U @ z2)
    return z1 - z3

"""Geometric multigrid V-cycle with ILU(0) smoothing, used as the
preconditioner of BiCGStab for the Newton systems.

The hierarchy descends from the solve grid by single bisections to the
16 x 8 base grid.  Coarse operators are Galerkin products ``P^T A P`` with
bilinear prolongation applied to both interleaved fields; the base grid is
solved by sparse LU.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..grids import interpolation_matrix, multigrid_hierarchy


@nb.njit(cache=True)
def ilu0(indptr, indices, data):
    """ILU(0) factors of a CSR matrix with sorted column indices.

    Returns the combined factor array (unit-lower L below the diagonal, U on
    and above it) and the position of every diagonal entry.
    """
    n = indptr.size - 1
    lu = data.copy()
    diag = np.empty(n, dtype=np.int64)
    for i in range(n):
        diag[i] = -1
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] == i:
                diag[i] = p
                break
    col_pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        for p in range(start, end):
            col_pos[indices[p]] = p
        for p in range(start, end):
            k = indices[p]
            if k >= i:
                break
            lu[p] /= lu[diag[k]]
            lik = lu[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                j = indices[q]
                pj = col_pos[j]
                if pj >= 0:
                    lu[pj] -= lik * lu[q]
        for p in range(start, end):
            col_pos[indices[p]] = -1
        if lu[diag[i]] == 0.0:
            lu[diag[i]] = 1e-300
    return lu, diag


@nb.njit(cache=True)
def ilu0_solve(indptr, indices, lu, diag, b):
    n = b.size
    x = b.copy()
    for i in range(n):
        s = x[i]
        for p in range(indptr[i], diag[i]):
            s -= lu[p] * x[indices[p]]
        x[i] = s
    for i in range(n - 1, -1, -1):
        s = x[i]
        for p in range(diag[i] + 1, indptr[i + 1]):
            s -= lu[p] * x[indices[p]]
        x[i] = s / lu[diag[i]]
    return x


@nb.njit(cache=True)
def _smooth(indptr, indices, data, lu, diag, b, x, sweeps):
    """``sweeps`` steps of x <- x + (LU)^-1 (b - A x), in place.

    ILU(0) shares the sparsity pattern of A, so the residual and the forward
    substitution are fused into one pass over each row.
    """
    n = b.size
    y = np.empty(n)
    for _ in range(sweeps):
        for i in range(n):
            s = b[i]
            for p in range(indptr[i], indptr[i + 1]):
                s -= data[p] * x[indices[p]]
            for p in range(indptr[i], diag[i]):
                s -= lu[p] * y[indices[p]]
            y[i] = s
        for i in range(n - 1, -1, -1):
            s = y[i]
            for p in range(diag[i] + 1, indptr[i + 1]):
                s -= lu[p] * y[indices[p]]
            y[i] = s / lu[diag[i]]
        for i in range(n):
            x[i] += y[i]
    return x


@dataclass
class _Level:
    A: sp.csr_matrix
    P: sp.csr_matrix | None = None     # prolongation from the next coarser level
    R: sp.csr_matrix | None = None     # P^T
    lu: np.ndarray | None = None
    diag: np.ndarray | None = None
    indptr: np.ndarray | None = None
    indices: np.ndarray | None = None
    direct: object = None


@dataclass
class MultigridPreconditioner:
    """V-cycle ``M^-1 b`` for the interleaved (c, p) system on ``grid``."""

    levels: list = field(default_factory=list)
    pre_smooth: int = 2
    post_smooth: int = 2
    cycles: int = 0

    @classmethod
    def build(cls, A, grid, pre_smooth=2, post_smooth=2):
        grids = multigrid_hierarchy(grid)
        A = sp.csr_matrix(A)
        A.sort_indices()
        levels = []
        for k, g in enumerate(grids):
            lev = _Level(A)
            if k + 1 < len(grids):
                lev.P, lev.R = block_transfer(grids[k + 1], g)
                lev.indptr = A.indptr.astype(np.int32)
                lev.indices = A.indices.astype(np.int32)
                lev.lu, lev.diag = ilu0(lev.indptr, lev.indices, A.data)
                A = lev.R @ (A @ lev.P)
                A.sort_indices()
            else:
                lev.direct = spla.splu(A.tocsc())
            levels.append(lev)
        return cls(levels, pre_smooth, post_smooth)

    def _cycle(self, k, b):
        lev = self.levels[k]
        if lev.direct is not None:
            return lev.direct.solve(b)
        A = lev.A
        x = np.zeros_like(b)
        _smooth(lev.indptr, lev.indices, A.data, lev.lu, lev.diag, b, x, self.pre_smooth)
        r = b - A @ x
        x += lev.P @ self._cycle(k + 1, lev.R @ r)
        _smooth(lev.indptr, lev.indices, A.data, lev.lu, lev.diag, b, x, self.post_smooth)
        return x

    def __call__(self, b):
        self.cycles += 1
        return self._cycle(0, np.asarray(b, dtype=float).ravel())

    def as_operator(self):
        n = self.levels[0].A.shape[0]
        return spla.LinearOperator((n, n), matvec=self, dtype=float)


def block_transfer(coarse, fine) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Bilinear prolongation acting on both fields of an interleaved vector, and its transpose."""
    key = ("P2", coarse.nx, fine.nx)
    if key not in fine._cache:
        P = sp.kron(interpolation_matrix(coarse, fine), sp.identity(2), format="csr")
        fine._cache[key] = (P, P.T.tocsr())
    return fine._cache[key]

"""Sparse direct solves, shift-invert eigenpairs and block-tridiagonal sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)


class SingularMatrixError(RuntimeError):
    """Raised when a factorization meets a zero pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


def _as_matrix(A):
    return A.matrix if hasattr(A, "matrix") else A


@dataclass(frozen=True)
class FactorizedSystem:
    """LU factors of a square sparse matrix, reusable across right-hand sides."""

    lu: spla.SuperLU
    dimension: int
    nnz_matrix: int

    @property
    def fill(self) -> int:
        return int(self.lu.L.nnz + self.lu.U.nnz)

    def solve(self, b):
        b = np.asarray(b)
        if np.iscomplexobj(b) and self.lu.L.dtype.kind != "c":
            return self.lu.solve(b.real.copy()) + 1j * self.lu.solve(b.imag.copy())
        return self.lu.solve(b)


def sparse_factor(A) -> FactorizedSystem:
    """LU factorization with partial pivoting and COLAMD column ordering."""
    m = sp.csc_matrix(_as_matrix(A))
    n, n2 = m.shape
    if n != n2:
        raise ValueError(f"matrix must be square, got {m.shape}")
    row_nnz = np.diff(m.tocsr().indptr)
    col_nnz = np.diff(m.indptr)
    if np.any(row_nnz == 0):
        row = int(np.flatnonzero(row_nnz == 0)[0])
        raise SingularMatrixError(f"structurally singular: row {row} is empty", pivot=row)
    if np.any(col_nnz == 0):
        col = int(np.flatnonzero(col_nnz == 0)[0])
        raise SingularMatrixError(f"structurally singular: column {col} is empty", pivot=col)
    try:
        lu = spla.splu(m, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularMatrixError(f"numerically singular matrix: {exc}") from exc
    diag_u = np.abs(lu.U.diagonal())
    if diag_u.size and diag_u.min() == 0.0:
        col = int(lu.perm_c[np.argmin(diag_u)])
        raise SingularMatrixError(f"zero pivot at column {col}", pivot=col)
    return FactorizedSystem(lu, n, m.nnz)


def shift_invert_eigs(A, sigma: complex, k: int = 1, tol: float = 1e-8, maxiter: int | None = None):
    """The ``k`` eigenpairs of ``A`` nearest ``sigma``.

    Arnoldi iteration on (A - sigma I)^{-1}; returns a list of
    (eigenvalue, eigenvector) sorted by distance to ``sigma``. Each pair is
    checked against the residual bound ``||A v - lambda v|| / ||v|| < tol``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m = sp.csc_matrix(_as_matrix(A)).astype(complex)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ValueError(f"matrix must be square, got {m.shape}")
    if n <= max(2 * k + 2, 8):
        vals, vecs = np.linalg.eig(m.toarray())
        order = np.argsort(np.abs(vals - sigma))[:k]
        pairs = [(complex(vals[i]), vecs[:, i]) for i in order]
    else:
        fact = sparse_factor(m - sigma * sp.identity(n, format="csc"))
        op = spla.LinearOperator((n, n), matvec=fact.solve, dtype=complex)
        ncv = min(n - 1, max(20, 4 * k))
        try:
            mu, vecs = spla.eigs(op, k=k, which="LM", ncv=ncv, tol=1e-13, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            lam = sigma + 1.0 / exc.eigenvalues
            res = [_residual(m, l, v) for l, v in zip(lam, exc.eigenvectors.T)]
            raise ConvergenceError(f"Arnoldi did not converge; residuals {res}", residuals=res) from exc
        lam = sigma + 1.0 / mu
        order = np.argsort(np.abs(lam - sigma))
        pairs = [(complex(lam[i]), vecs[:, i]) for i in order]
    residuals = [_residual(m, lam, v) for lam, v in pairs]
    if max(residuals) >= tol:
        raise ConvergenceError(f"eigenpair residuals {residuals} exceed {tol}", residuals=residuals)
    return pairs


def _residual(m, lam, v) -> float:
    return float(np.linalg.norm(m @ v - lam * v) / np.linalg.norm(v))


def block_end_response(diag_block, coupling, n_blocks: int, source, project=None):
    """End-block solution of a block-tridiagonal system driven from block 0.

    Solves ``A x = b`` where ``b`` is nonzero only in block 0 and returns
    ``(x_0, P x_last)``. ``diag_block(i)`` gives the dense diagonal block i,
    ``coupling(i)`` the pair of sparse off-diagonal blocks
    ``(A[i, i+1], A[i+1, i])``. Blocks are eliminated from the last one
    backwards, so memory stays at a few dense blocks regardless of length.
    ``project`` (rows x block) restricts the returned end values.
    """
    last = n_blocks - 1
    T = diag_block(last)
    width = T.shape[0]
    R = np.eye(width, dtype=complex) if project is None else np.asarray(project, dtype=complex)
    for i in range(last - 1, -1, -1):
        upper, lower = coupling(i)
        lu = sla.lu_factor(T, check_finite=False)
        X = sla.lu_solve(lu, lower.toarray(), check_finite=False)
        R = -R @ X
        T = diag_block(i) - upper @ X
    lu = sla.lu_factor(T, check_finite=False)
    if np.any(np.diag(lu[0]) == 0):
        raise SingularMatrixError("zero pivot in block sweep", pivot=0)
    x0 = sla.lu_solve(lu, np.asarray(source, dtype=complex), check_finite=False)
    return x0, R @ x0

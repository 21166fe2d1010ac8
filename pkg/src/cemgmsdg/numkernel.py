"""Linear-algebra kernels: sparse SPD solves, low-rank-updated SPD solves,
dense symmetric-definite eigenproblems and pivoted Cholesky selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DIRECT_MAX_DOFS = 250_000  # direct SuperLU beats SA-AMG PCG by ~15x at 7e4 dofs


class SolverError(ArithmeticError):
    pass


class SPDFactor:
    """Sparse LU with symmetric ordering and no off-diagonal pivoting.

    For an SPD matrix this is a Cholesky factorization in LU clothing; a
    nonpositive pivot therefore flags a matrix that is not SPD.
    """

    def __init__(self, M, context: str = ""):
        M = sp.csc_matrix(M)
        if M.shape[0] != M.shape[1]:
            raise SolverError(f"{context}: matrix is not square {M.shape}")
        self.n = M.shape[0]
        d = M.diagonal()
        if not np.all(d > 0):
            raise SolverError(f"{context}: matrix is not symmetric positive definite "
                              "(nonpositive diagonal)")
        # symmetric Jacobi scaling tames high-contrast coefficients
        self._s = 1.0 / np.sqrt(d)
        Dm = sp.diags(self._s)
        M = sp.csc_matrix(Dm @ M @ Dm)
        try:
            self._lu = spla.splu(M, permc_spec=_ordering(self.n), diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:  # exactly singular
            raise SolverError(f"{context}: factorization failed ({exc})") from exc
        d = self._lu.U.diagonal()
        if not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise SolverError(f"{context}: matrix is not symmetric positive definite "
                              f"(min pivot {d.min():.3e})")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        s = self._s if b.ndim == 1 else self._s[:, None]
        return s * self._lu.solve(s * b)


def solve_spd(M, b: np.ndarray, tol: float = 1e-10, context: str = "",
              direct_max: int = DIRECT_MAX_DOFS) -> np.ndarray:
    """Solve M x = b for sparse SPD M to relative residual ``tol``."""
    b = np.asarray(b, dtype=float)
    M = sp.csr_matrix(M)
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b)
    if M.shape[0] <= direct_max:
        x = SPDFactor(M, context).solve(b)
    else:
        x = _pcg_amg(M, b, tol, context)
    res = np.linalg.norm(M @ x - b) / nb
    if not res <= max(tol, residual_floor(M, x, b)):
        raise SolverError(f"{context}: relative residual {res:.3e} > {tol:.1e}")
    return x


def residual_floor(M, x: np.ndarray, b: np.ndarray, safety: float = 10.0) -> float:
    """Smallest relative residual a backward-stable solve can guarantee in double precision.

    For high-contrast coefficients eps * || |M| |x| || / ||b|| can exceed the
    requested tolerance; checks are made against the larger of the two.
    """
    return safety * np.finfo(float).eps * np.linalg.norm(abs(M) @ np.abs(x)) / np.linalg.norm(b)


def _pcg_amg(M, b, tol, context):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(M, symmetry="symmetric", max_coarse=500)
    x = ml.solve(b, tol=tol * 0.1, accel="cg", maxiter=1000)
    return np.asarray(x)


class LowRankSPDSolver:
    """Solver for (A + U U^T) x = b with sparse SPD A and a thin sparse U.

    Factors the quasi-definite augmented matrix [[A, U], [U^T, -I]] with
    diagonal pivots. Its inertia is (n positive, k negative) exactly when
    A + U U^T is SPD, which is checked on the pivots.
    """

    def __init__(self, A, U, context: str = ""):
        self.A = sp.csr_matrix(A)
        self.U = sp.csc_matrix(U)
        n, k = self.U.shape
        self.n = n
        d = self.A.diagonal()
        if not np.all(d > 0):
            raise SolverError(f"{context}: operator is not symmetric positive definite "
                              "(nonpositive diagonal)")
        self._s = 1.0 / np.sqrt(d)
        Dm = sp.diags(self._s)
        K = sp.bmat([[Dm @ self.A @ Dm, Dm @ self.U],
                     [(Dm @ self.U).T, -sp.identity(k)]], format="csc")
        try:
            self._lu = spla.splu(K, permc_spec=_ordering(n + k), diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SolverError(f"{context}: factorization failed ({exc})") from exc
        piv = self._lu.U.diagonal()
        if not np.all(np.isfinite(piv)) or int((piv > 0).sum()) != n:
            raise SolverError(f"{context}: operator is not symmetric positive definite")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        k = self.U.shape[1]
        if b.ndim == 1:
            rhs = np.concatenate([self._s * b, np.zeros(k)])
            return self._s * self._lu.solve(rhs)[:self.n]
        rhs = np.vstack([self._s[:, None] * b, np.zeros((k, b.shape[1]))])
        return self._s[:, None] * self._lu.solve(rhs)[:self.n]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.U @ (self.U.T @ x)


def _ordering(n: int) -> str:
    # SuperLU's MMD on A+A^T gives the least fill but its ordering time blows up past ~2e4
    return "MMD_AT_PLUS_A" if n <= 20_000 else "MMD_ATA"


@dataclass
class EigenPairs:
    values: np.ndarray
    vectors: np.ndarray  # columns, B-orthonormal


def apply_sign_convention(V: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    V = np.array(V, dtype=float, copy=True)
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > eps)
        if nz.size and V[nz[0], j] < 0:
            V[:, j] = -V[:, j]
    return V


def generalized_eig_sym(A: np.ndarray, B: np.ndarray, count: int) -> EigenPairs:
    """The ``count`` smallest pairs of A v = lambda B v, ascending, B-orthonormal."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"requested {count} eigenpairs of a {n}x{n} problem")
    try:
        sla.cholesky(B, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolverError("mass matrix B is not positive definite") from exc
    w, V = sla.eigh(A, B, subset_by_index=[0, count - 1], driver="gvx")
    return EigenPairs(w, apply_sign_convention(V))


def pivoted_cholesky_select(G: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Indices of a numerically independent subset of columns of SPSD G.

    Diagonal pivoting (LAPACK ``dpstrf``) on the Jacobi-scaled matrix; the
    factorization stops once the largest remaining pivot falls below
    ``rel_tol`` times the largest pivot. Returned indices are sorted.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    d = np.diag(G).copy()
    live = d > 0
    if not live.any():
        return np.zeros(0, dtype=int)
    idx = np.flatnonzero(live)
    s = 1.0 / np.sqrt(d[idx])
    Gs = G[np.ix_(idx, idx)] * s[:, None] * s[None, :]
    Gs = 0.5 * (Gs + Gs.T)
    _, piv, rank, info = sla.lapack.dpstrf(Gs, tol=rel_tol * float(np.max(np.diag(Gs))), lower=1)
    if info < 0:
        raise SolverError(f"dpstrf failed with info={info}")
    keep = np.sort(idx[piv[:rank] - 1])
    return keep

"""Auxiliary spectral space, the projection onto it, CEM basis functions and the coarse Galerkin solve."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import Forms
from .grid import Grid, Region
from .numkernel import (EigenPairs, LowRankSPDSolver, SolverError, generalized_eig_sym,
                        pivoted_cholesky_select)

log = logging.getLogger(__name__)


class EmptySpaceError(SolverError):
    pass


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class AuxiliarySpace:
    grid: Grid
    counts: np.ndarray  # L_i per block
    pairs: list[EigenPairs]  # L_i + 1 pairs per block
    W: sp.csc_matrix  # S Phi, one column per auxiliary function
    Phi: sp.csc_matrix
    col_offsets: np.ndarray

    @property
    def Lambda(self) -> float:
        return float(min(p.values[c] for p, c in zip(self.pairs, self.counts)))

    @property
    def lambda_max(self) -> float:
        return float(max(p.values[c - 1] for p, c in zip(self.pairs, self.counts)))

    def phi(self, i: int, j: int) -> np.ndarray:
        """phi_j^(i) (0-based j) embedded as a full-length vector."""
        return self.Phi[:, self.col_offsets[i] + j].toarray().ravel()

    def columns(self, blocks: Iterable[int]) -> np.ndarray:
        return np.concatenate([np.arange(self.col_offsets[b], self.col_offsets[b + 1])
                               for b in blocks])


def build_auxiliary_space(forms: Forms, L: int = 2, overrides: Mapping[int, int] | None = None,
                          threads: int = 1) -> AuxiliarySpace:
    grid = forms.grid
    counts = np.full(grid.n_elements, int(L), dtype=int)
    for i, li in (overrides or {}).items():
        counts[int(i)] = int(li)
    if counts.min() < 1:
        raise ValueError("auxiliary count per block must be >= 1")

    def one(i):
        a, s = forms.block_a(i), forms.block_s(i)
        if a.shape[0] < counts[i] + 1:
            raise ValueError(f"block {i} has {a.shape[0]} dofs, needs at least {counts[i] + 1}")
        try:
            return generalized_eig_sym(a, s, int(counts[i]) + 1)
        except SolverError as exc:
            raise SolverError(f"block {i}: {exc}") from exc

    pairs = _pmap(one, range(grid.n_elements), threads)
    col_offsets = np.concatenate([[0], np.cumsum(counts)])
    rows, cols, vals = [], [], []
    for i, p in enumerate(pairs):
        d = grid.block_dofs(i)
        V = p.vectors[:, :counts[i]]
        for j in range(counts[i]):
            rows.append(d)
            cols.append(np.full(len(d), col_offsets[i] + j))
            vals.append(V[:, j])
    shape = (grid.total_dofs, int(col_offsets[-1]))
    Phi = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=shape)
    W = sp.csc_matrix(forms.S @ Phi)
    W.eliminate_zeros()
    return AuxiliarySpace(grid, counts, pairs, W, Phi, col_offsets)


def project_pi(v: np.ndarray, aux: AuxiliarySpace) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients s_i(v, phi_j^(i)) (flattened by block, then mode) and pi(v)."""
    c = aux.W.T @ np.asarray(v, dtype=float)
    return c, aux.Phi @ c


@dataclass
class MultiscaleBasis:
    dofs: np.ndarray  # support dofs (sorted)
    values: np.ndarray
    origin: tuple  # ("offline", i, j, m) | ("online", node, k, m) | ("global", i, j) | ...
    support: Region

    def vector(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.dofs] = self.values
        return out


class CEMSystem:
    """The operator a_DG(., .) + s(pi ., pi .) restricted to a union of coarse blocks."""

    def __init__(self, forms: Forms, aux: AuxiliarySpace, region: Region):
        grid = forms.grid
        self.region = region
        self.dofs = grid.region_dofs(region)
        A = forms.A[self.dofs][:, self.dofs]
        U = aux.W[self.dofs][:, aux.columns(region.elements)]
        self.solver = LowRankSPDSolver(A, U, context=f"{region.kind} {region.center} m={region.layers}")

    def solve(self, rhs_full: np.ndarray) -> np.ndarray:
        return self.solver.solve(np.asarray(rhs_full)[self.dofs])

    def matvec_local(self, x: np.ndarray) -> np.ndarray:
        return self.solver.matvec(x)


def _cem_bases_for_block(i: int, m: int, forms: Forms, aux: AuxiliarySpace,
                         modes: Sequence[int] | None = None) -> list[MultiscaleBasis]:
    grid = forms.grid
    region = grid.oversample_block(i, m) if m >= 0 else grid.whole()
    system = CEMSystem(forms, aux, region)
    modes = range(aux.counts[i]) if modes is None else modes
    out = []
    for j in modes:
        # s(phi_j, pi v) = s_i(phi_j, v) by s-orthonormality
        rhs = aux.W[:, aux.col_offsets[i] + j].toarray().ravel()
        x = system.solve(rhs)
        origin = ("offline", i, j, m) if m >= 0 else ("global", i, j)
        out.append(MultiscaleBasis(system.dofs, x, origin, region))
    return out


def build_cem_basis(i: int, j: int, m: int, forms: Forms, aux: AuxiliarySpace) -> MultiscaleBasis:
    """Localized CEM basis psi_{j,ms}^(i) on K_{i,m} (``j`` is 0-based)."""
    if not 0 <= j < aux.counts[i]:
        raise IndexError(f"mode {j} out of range for block {i}")
    if m < 0:
        raise ValueError("oversampling layers must be nonnegative")
    return _cem_bases_for_block(i, m, forms, aux, [j])[0]


def build_global_basis(i: int, j: int, forms: Forms, aux: AuxiliarySpace) -> MultiscaleBasis:
    if not 0 <= j < aux.counts[i]:
        raise IndexError(f"mode {j} out of range for block {i}")
    return _cem_bases_for_block(i, -1, forms, aux, [j])[0]


@dataclass
class MultiscaleSpace:
    n: int
    bases: list[MultiscaleBasis] = field(default_factory=list)
    log: list[tuple] = field(default_factory=list)  # (iteration, event, origin)

    def __len__(self) -> int:
        return len(self.bases)

    def append(self, basis: MultiscaleBasis, iteration: int = 0) -> None:
        self.bases.append(basis)
        self.log.append((iteration, "add", basis.origin))

    def prolongation(self) -> sp.csc_matrix:
        if not self.bases:
            return sp.csc_matrix((self.n, 0))
        indptr = np.concatenate([[0], np.cumsum([len(b.dofs) for b in self.bases])])
        indices = np.concatenate([b.dofs for b in self.bases])
        data = np.concatenate([b.values for b in self.bases])
        return sp.csc_matrix((data, indices, indptr), shape=(self.n, len(self.bases)))

    def copy(self) -> "MultiscaleSpace":
        return MultiscaleSpace(self.n, list(self.bases), list(self.log))


def build_offline_space(forms: Forms, aux: AuxiliarySpace, m: int = 2,
                        threads: int = 1) -> MultiscaleSpace:
    grid = forms.grid
    per_block = _pmap(lambda i: _cem_bases_for_block(i, m, forms, aux),
                      range(grid.n_elements), threads)
    space = MultiscaleSpace(grid.total_dofs)
    for bases in per_block:
        for b in bases:
            space.append(b, 0)
    return space


def full_space(grid: Grid) -> MultiscaleSpace:
    """Every fine dof as its own basis vector: V_h itself."""
    space = MultiscaleSpace(grid.total_dofs)
    whole = grid.whole()
    for d in range(grid.total_dofs):
        space.append(MultiscaleBasis(np.array([d]), np.array([1.0]), ("fine", d), whole))
    return space


@dataclass
class CoarseSolution:
    u: np.ndarray
    coefficients: np.ndarray
    dropped: list[tuple]


def solve_coarse(space: MultiscaleSpace, forms: Forms, iteration: int = 0,
                 pivot_tol: float = 1e-12) -> CoarseSolution:
    """Galerkin solve of a_DG(u, w) = (f, w) over the span of ``space``.

    Basis vectors that are numerically dependent (pivot below ``pivot_tol``
    times the largest pivot after Jacobi scaling) are removed from the space
    and logged.
    """
    if len(space) == 0:
        raise EmptySpaceError("multiscale space is empty")
    R = space.prolongation()
    G = (R.T @ (forms.A @ R))
    G = G.toarray() if sp.issparse(G) else np.asarray(G)
    G = 0.5 * (G + G.T)
    rhs = R.T @ forms.F
    keep = pivoted_cholesky_select(G, pivot_tol)
    if keep.size == 0:
        raise EmptySpaceError("all basis vectors dropped as dependent")
    dropped = []
    if keep.size < len(space):
        drop = sorted(set(range(len(space))) - set(keep.tolist()))
        for d in drop:
            origin = space.bases[d].origin
            dropped.append(origin)
            space.log.append((iteration, "drop", origin))
            log.warning("dropping near-dependent basis %s at iteration %d", origin, iteration)
        space.bases = [space.bases[k] for k in keep]
        G = G[np.ix_(keep, keep)]
        rhs = rhs[keep]
        R = R[:, keep]
    c = sla.cho_solve(sla.cho_factor(G), rhs)
    return CoarseSolution(R @ c, c, dropped)

"""IPDG operator, load vector, weighted mass matrices and the energy / DG / L2 norms.

Functions are piecewise bilinear per fine cell and continuous inside each
coarse block; the coupling between blocks comes only from the coarse-edge
terms of the symmetric interior-penalty form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .grid import Grid, Region
from .medium import PermeabilityField

log = logging.getLogger(__name__)

_GP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GW = np.array([0.5, 0.5])


class CoercivityError(ArithmeticError):
    pass


class SourceEvaluationError(ArithmeticError):
    pass


def _shape(xi, eta):
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta], axis=-1)


def _shape_grad(xi, eta, hx, hy):
    xi, eta = np.broadcast_arrays(np.asarray(xi, float), np.asarray(eta, float))
    gx = np.stack([-(1 - eta), (1 - eta), -eta, eta], axis=-1) / hx
    gy = np.stack([-(1 - xi), -xi, (1 - xi), xi], axis=-1) / hy
    return gx, gy


def element_matrices(hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear stiffness and mass on an hx-by-hy cell by 2x2 Gauss quadrature.

    Local node order (0,0), (1,0), (0,1), (1,1).
    """
    K = np.zeros((4, 4))
    M = np.zeros((4, 4))
    for xi, wx in zip(_GP, _GW):
        for eta, wy in zip(_GP, _GW):
            w = wx * wy * hx * hy
            N = _shape(xi, eta)
            gx, gy = _shape_grad(xi, eta, hx, hy)
            K += w * (np.outer(gx, gx) + np.outer(gy, gy))
            M += w * np.outer(N, N)
    return K, M


def _assemble_cellwise(grid: Grid, coef_blocks: np.ndarray, local: np.ndarray) -> sp.csr_matrix:
    """Sum coef[cell] * local over all fine cells, dropping eliminated dofs."""
    cd = grid.cell_dofs().reshape(-1, 4)
    c = np.asarray(coef_blocks).reshape(-1)
    rows = np.repeat(cd, 4, axis=1).reshape(-1)
    cols = np.tile(cd, (1, 4)).reshape(-1)
    data = (c[:, None] * local.reshape(1, 16)).reshape(-1)
    keep = (rows >= 0) & (cols >= 0)
    n = grid.total_dofs
    A = sp.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def _symmetrize(A: sp.spmatrix) -> sp.csr_matrix:
    # a+b == b+a in floating point, so this is exactly symmetric
    A = sp.csr_matrix(A)
    S = (A + A.T.tocsr()) * 0.5
    S = S.tocsr()
    S.sum_duplicates()
    S.sort_indices()
    return S


def assemble_volume(field: PermeabilityField, grid: Grid) -> sp.csr_matrix:
    K, _ = element_matrices(grid.hx, grid.hy)
    return _symmetrize(_assemble_cellwise(grid, grid.blocks_view(field.values), K))


def assemble_weighted_mass(weight: np.ndarray, grid: Grid) -> sp.csr_matrix:
    """sum_K int_K w v u with ``weight`` given per fine cell on the global fine array."""
    _, M = element_matrices(grid.hx, grid.hy)
    return _symmetrize(_assemble_cellwise(grid, grid.blocks_view(weight), M))


def assemble_mass(grid: Grid) -> sp.csr_matrix:
    return assemble_weighted_mass(np.ones(grid.fine_shape), grid)


# -- edge terms --------------------------------------------------------

def _side_trace(side: str, hx: float, hy: float, normal):
    """Trace values and normal derivatives of a cell's 4 shape functions on one of its sides.

    Returns (values (2,4), dn (2,4)) at the two Gauss points along the side.
    """
    t = _GP
    if side == "right":
        xi, eta = np.ones(2), t
    elif side == "left":
        xi, eta = np.zeros(2), t
    elif side == "top":
        xi, eta = t, np.ones(2)
    else:
        xi, eta = t, np.zeros(2)
    N = _shape(xi, eta)
    gx, gy = _shape_grad(xi, eta, hx, hy)
    return N, gx * normal[0] + gy * normal[1]


def edge_local_matrices(vertical: bool, boundary: bool, hx: float, hy: float, normal):
    """Per fine-edge-segment matrices (flux_plus, flux_minus, penalty) without kappa / gamma.

    Interior: 8x8 over [plus cell corners, minus cell corners]; boundary: 4x4.
    flux_* already include the symmetric partner, so the segment matrix is
    kp * flux_plus + km * flux_minus + (gamma/h) * kbar * penalty.
    """
    seg = hy if vertical else hx
    w = _GW * seg
    if vertical:
        plus_side, minus_side = ("right", "left")
    else:
        plus_side, minus_side = ("top", "bottom")
    if boundary:
        # plus block is the only one; its side facing the outward normal
        if vertical:
            plus_side = "right" if normal[0] > 0 else "left"
        else:
            plus_side = "top" if normal[1] > 0 else "bottom"
        Np, dNp = _side_trace(plus_side, hx, hy, normal)
        jump = Np
        C = -np.einsum("g,gp,gq->pq", w, jump, dNp)
        P = np.einsum("g,gp,gq->pq", w, jump, jump)
        return C + C.T, None, P
    Np, dNp = _side_trace(plus_side, hx, hy, normal)
    Nm, dNm = _side_trace(minus_side, hx, hy, normal)
    jump = np.hstack([Np, -Nm])
    fp = np.hstack([0.5 * dNp, np.zeros_like(dNm)])
    fm = np.hstack([np.zeros_like(dNp), 0.5 * dNm])
    Cp = -np.einsum("g,gp,gq->pq", w, jump, fp)
    Cm = -np.einsum("g,gp,gq->pq", w, jump, fm)
    P = np.einsum("g,gp,gq->pq", w, jump, jump)
    return Cp + Cp.T, Cm + Cm.T, P


def kappa_bar(field: PermeabilityField, grid: Grid) -> np.ndarray:
    kb = grid.blocks_view(field.values).reshape(grid.n_elements, -1).max(axis=1)
    out = np.empty(len(grid.edges))
    for e in grid.edges:
        out[e.index] = kb[e.plus] if e.boundary else 0.5 * (kb[e.plus] + kb[e.minus])
    return out


@dataclass
class EdgeForms:
    flux: sp.csr_matrix  # consistency + symmetry terms
    penalty: sp.csr_matrix  # (gamma/h) kbar [v][w]


def assemble_ipdg_edges(field: PermeabilityField, grid: Grid, gamma: float,
                        edges: Sequence[int] | None = None) -> EdgeForms:
    if not gamma > 0:
        raise ValueError("penalty parameter gamma must be positive")
    kb = kappa_bar(field, grid)
    kblk = grid.blocks_view(field.values)
    cd = grid.cell_dofs()
    pen_scale = gamma / grid.h
    sel = grid.edges if edges is None else [grid.edges[i] for i in edges]
    mats = {}
    flux_parts, pen_parts = [], []
    for e in sel:
        key = (e.vertical, e.boundary, e.normal)
        if key not in mats:
            mats[key] = edge_local_matrices(e.vertical, e.boundary, grid.hx, grid.hy, e.normal)
        Fp, Fm, P = mats[key]
        if e.vertical:
            ap = grid.fx - 1 if (not e.boundary or e.normal[0] > 0) else 0
            dp = cd[e.plus, :, ap, :]
            kp = kblk[e.plus, :, ap]
            if not e.boundary:
                dm = cd[e.minus, :, 0, :]
                km = kblk[e.minus, :, 0]
        else:
            bp = grid.fy - 1 if (not e.boundary or e.normal[1] > 0) else 0
            dp = cd[e.plus, bp, :, :]
            kp = kblk[e.plus, bp, :]
            if not e.boundary:
                dm = cd[e.minus, 0, :, :]
                km = kblk[e.minus, 0, :]
        if e.boundary:
            dofs = dp
            flux = kp[:, None, None] * Fp[None]
        else:
            dofs = np.hstack([dp, dm])
            flux = kp[:, None, None] * Fp[None] + km[:, None, None] * Fm[None]
        pen = np.broadcast_to(pen_scale * kb[e.index] * P, flux.shape)
        flux_parts.append((dofs, flux))
        pen_parts.append((dofs, pen))
    n = grid.total_dofs
    return EdgeForms(_triplets_to_csr(flux_parts, n), _triplets_to_csr(pen_parts, n))


def _triplets_to_csr(parts, n) -> sp.csr_matrix:
    if not parts:
        return sp.csr_matrix((n, n))
    rows, cols, data = [], [], []
    for dofs, mats in parts:
        k = dofs.shape[1]
        rows.append(np.repeat(dofs, k, axis=1).reshape(-1))
        cols.append(np.tile(dofs, (1, k)).reshape(-1))
        data.append(np.asarray(mats).reshape(-1))
    r, c, d = (np.concatenate(x) for x in (rows, cols, data))
    keep = (r >= 0) & (c >= 0)
    A = sp.coo_matrix((d[keep], (r[keep], c[keep])), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return _symmetrize(A)


# -- load --------------------------------------------------------------

def assemble_load(f: Callable[[np.ndarray, np.ndarray], np.ndarray], grid: Grid) -> np.ndarray:
    """F_j = int f v_j with 2x2 Gauss per fine cell.

    A non-finite value at a Gauss point is re-evaluated once at a point moved
    a tenth of a fine cell towards the cell center; if that is still
    non-finite, ``SourceEvaluationError`` is raised.
    """
    nb = grid.n_elements
    bx = (np.arange(nb) % grid.nx)[:, None, None]
    by = (np.arange(nb) // grid.nx)[:, None, None]
    x0, _, y0, _ = grid.config.domain
    ca = np.arange(grid.fx)[None, None, :]
    cb = np.arange(grid.fy)[None, :, None]
    cell_x = x0 + bx * grid.Hx + ca * grid.hx  # (nb, 1, fx)
    cell_y = y0 + by * grid.Hy + cb * grid.hy  # (nb, fy, 1)
    Fcell = np.zeros((nb, grid.fy, grid.fx, 4))
    for xi, wx in zip(_GP, _GW):
        for eta, wy in zip(_GP, _GW):
            X = np.broadcast_to(cell_x + xi * grid.hx, (nb, grid.fy, grid.fx))
            Y = np.broadcast_to(cell_y + eta * grid.hy, (nb, grid.fy, grid.fx))
            with np.errstate(all="ignore"):
                fv = np.asarray(f(X, Y), dtype=float) * np.ones(X.shape)
            bad = ~np.isfinite(fv)
            if bad.any():
                Xp = X[bad] + 0.1 * grid.hx * np.sign(0.5 - xi)
                Yp = Y[bad] + 0.1 * grid.hy * np.sign(0.5 - eta)
                with np.errstate(all="ignore"):
                    fv[bad] = np.asarray(f(Xp, Yp), dtype=float) * np.ones(Xp.shape)
                if not np.all(np.isfinite(fv)):
                    raise SourceEvaluationError("source is non-finite at a quadrature point")
            N = _shape(xi, eta)
            Fcell += (wx * wy * grid.hx * grid.hy) * fv[..., None] * N
    cd = grid.cell_dofs()
    keep = cd >= 0
    return np.bincount(cd[keep], weights=Fcell[keep], minlength=grid.total_dofs)


# -- bundle ------------------------------------------------------------

@dataclass
class Forms:
    grid: Grid
    field: PermeabilityField
    gamma: float
    volume: sp.csr_matrix
    edges: EdgeForms
    A: sp.csr_matrix
    S: sp.csr_matrix
    M: sp.csr_matrix
    F: np.ndarray
    kappa_tilde: np.ndarray
    kbar: np.ndarray

    @property
    def dg_matrix(self) -> sp.csr_matrix:
        return self.volume + self.edges.penalty

    def block_a(self, i: int) -> np.ndarray:
        d = self.grid.block_dofs(i)
        return self.volume[d[0]:d[-1] + 1, d[0]:d[-1] + 1].toarray()

    def block_s(self, i: int) -> np.ndarray:
        d = self.grid.block_dofs(i)
        return self.S[d[0]:d[-1] + 1, d[0]:d[-1] + 1].toarray()


def assemble_forms(field: PermeabilityField, grid: Grid, kappa_tilde: np.ndarray,
                   source: Callable | None = None, gamma: float = 4.0) -> Forms:
    vol = assemble_volume(field, grid)
    ed = assemble_ipdg_edges(field, grid, gamma)
    A = _symmetrize(vol + ed.flux + ed.penalty)
    S = assemble_weighted_mass(kappa_tilde, grid)
    M = assemble_mass(grid)
    F = assemble_load(source, grid) if source is not None else np.zeros(grid.total_dofs)
    return Forms(grid, field, gamma, vol, ed, A, S, M, F, kappa_tilde, kappa_bar(field, grid))


def norms(v: np.ndarray, forms: Forms, tol: float = 1e-12) -> tuple[float, float, float]:
    """(energy norm, DG norm, L2 norm) of a coefficient vector."""
    v = np.asarray(v, dtype=float)
    a2 = float(v @ (forms.A @ v))
    if a2 < -tol * float(v @ v) * max(1.0, abs(forms.A).max()):
        raise CoercivityError(f"a_DG(v,v) = {a2:.3e} < 0; penalty gamma={forms.gamma} too small")
    dg2 = float(v @ (forms.dg_matrix @ v))
    l2 = float(v @ (forms.M @ v))
    return np.sqrt(max(a2, 0.0)), np.sqrt(max(dg2, 0.0)), np.sqrt(max(l2, 0.0))


def restrict(obj, grid: Grid, region: Region):
    """Extension-by-zero restriction of an operator (rows and columns) or a vector to a region."""
    idx = grid.region_dofs(region)
    if len(idx) == 0:
        raise ValueError("region carries no dofs")
    if sp.issparse(obj):
        return sp.csr_matrix(obj)[idx][:, idx]
    return np.asarray(obj)[idx]

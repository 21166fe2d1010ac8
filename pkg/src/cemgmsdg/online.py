"""Residual-driven online enrichment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assembly import Forms
from .grid import Grid
from .medium import PartitionOfUnity
from .numkernel import SPDFactor, SolverError
from .offline import (AuxiliarySpace, CEMSystem, MultiscaleBasis, MultiscaleSpace, _pmap,
                      solve_coarse)

log = logging.getLogger(__name__)


def global_residual(u: np.ndarray, forms: Forms) -> np.ndarray:
    """Coefficients of r(v) = a_DG(u, v) - (f, v), i.e. A u - F."""
    return forms.A @ u - forms.F


class NeighborhoodOperators:
    """Cached factorizations of A restricted (extension by zero) to each omega_i."""

    def __init__(self, forms: Forms):
        self.forms = forms
        self._cache: dict[int, tuple[np.ndarray, SPDFactor]] = {}

    def get(self, node: int) -> tuple[np.ndarray, SPDFactor]:
        hit = self._cache.get(node)
        if hit is None:
            grid = self.forms.grid
            dofs = grid.region_dofs(grid.oversample_neighborhood(node, 0))
            Aw = self.forms.A[dofs][:, dofs]
            try:
                hit = (dofs, SPDFactor(Aw, context=f"neighborhood {node}"))
            except SolverError as exc:
                raise SolverError(f"restricted operator on neighborhood {node} is not SPD: "
                                  f"{exc}") from exc
            self._cache[node] = hit
        return hit

    def riesz(self, node: int, residual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(dofs, rho) with A|_omega rho = residual|_omega."""
        dofs, fac = self.get(node)
        return dofs, fac.solve(residual[dofs])


def local_indicator(node: int, residual: np.ndarray, ops: NeighborhoodOperators) -> float:
    """delta_i = sup over V_h(omega_i) of |r(v)| / ||v||_a."""
    dofs, rho = ops.riesz(node, residual)
    return float(np.sqrt(max(float(residual[dofs] @ rho), 0.0)))


def select_regions(deltas: Sequence[float], theta: float,
                   eps_skip: float = 1e-12) -> tuple[int, list[int]]:
    """Smallest p such that the squared tail after the p largest indicators is < theta * total.

    Ties are broken by ascending node index. For ``theta == 0`` every node
    whose indicator exceeds ``eps_skip`` times the largest is taken.
    """
    d = np.asarray(deltas, dtype=float)
    if np.any(d < 0):
        raise ValueError("indicators must be nonnegative")
    if not 0 <= theta < 1:
        raise ValueError("theta must lie in [0, 1)")
    if d.size == 0 or d.max() == 0:
        return 0, []
    order = np.lexsort((np.arange(d.size), -d))
    if theta == 0:
        sel = [int(i) for i in order if d[i] > eps_skip * d.max()]
        return len(sel), sorted(sel)
    sq = d[order] ** 2
    total = sq.sum()
    # tail[p] = sum of sq[p:], p = 0..n
    tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    p = next(p for p in range(1, d.size + 1) if tail[p] < theta * total)
    return p, sorted(int(i) for i in order[:p])


def build_online_basis(node: int, residual: np.ndarray, m: int, forms: Forms,
                       aux: AuxiliarySpace, pou: PartitionOfUnity, iteration: int = 0,
                       global_support: bool = False) -> MultiscaleBasis:
    """Solve a_DG(beta, v) + s(pi beta, pi v) = r_i(v) on V_h(omega_{i,m}).

    r_i(v) is realized as v^T D_i (A u - F) with D_i the nodal values of chi_i.
    """
    grid = forms.grid
    region = grid.whole() if global_support else grid.oversample_neighborhood(node, m)
    rhs = pou.nodal_values(node) * residual
    system = CEMSystem(forms, aux, region)
    try:
        beta = system.solve(rhs)
    except SolverError as exc:
        raise SolverError(f"online basis at node {node}: {exc}") from exc
    return MultiscaleBasis(system.dofs, beta, ("online", node, iteration, m), region)


@dataclass
class EnrichmentState:
    k: int
    space_size: int
    u: np.ndarray
    residual: np.ndarray
    indicators: np.ndarray | None = None
    selected: list[int] = field(default_factory=list)
    added: int = 0  # online bases appended to reach this state
    dropped: list[tuple] = field(default_factory=list)
    e_l2: float | None = None
    e_a: float | None = None


@dataclass
class AdaptiveConfig:
    theta: float = 0.0
    n_iter: int = 3
    m_online: int = 3
    eps_skip: float = 1e-12
    delta_floor: float | None = 1e-13  # stop once every delta < floor * ||F||; None disables
    threads: int = 1


def run_adaptive(cfg: AdaptiveConfig, forms: Forms, aux: AuxiliarySpace, pou: PartitionOfUnity,
                 offline_space: MultiscaleSpace,
                 errors: Callable[[np.ndarray], tuple[float, float]] | None = None,
                 ) -> tuple[list[EnrichmentState], MultiscaleSpace]:
    """Algorithm loop: indicators, selection, online bases, re-solve. Returns states k = 0..n_iter."""
    if cfg.n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    grid = forms.grid
    space = offline_space.copy()
    ops = NeighborhoodOperators(forms)
    sol = solve_coarse(space, forms, 0)
    states = [_state(0, space, sol.u, forms, errors, 0, sol.dropped)]
    fnorm = float(np.linalg.norm(forms.F))
    for k in range(cfg.n_iter):
        st = states[-1]
        try:
            deltas = np.array(_pmap(lambda i: local_indicator(i, st.residual, ops),
                                    range(grid.n_nodes), cfg.threads))
        except SolverError as exc:
            raise SolverError(f"iteration {k}: {exc}") from exc
        st.indicators = deltas
        if cfg.delta_floor is not None and np.all(deltas < cfg.delta_floor * fnorm):
            log.info("all indicators below floor at iteration %d; stopping", k)
            break
        p, sel = select_regions(deltas, cfg.theta, cfg.eps_skip)
        st.selected = sel
        if p == 0:
            log.info("residual vanished at iteration %d", k)
            break
        try:
            new = _pmap(lambda i: build_online_basis(i, st.residual, cfg.m_online, forms, aux,
                                                     pou, k),
                        sel, cfg.threads)
        except SolverError as exc:
            raise SolverError(f"iteration {k}: {exc}") from exc
        for b in new:
            space.append(b, k + 1)
        sol = solve_coarse(space, forms, k + 1)
        states.append(_state(k + 1, space, sol.u, forms, errors, len(new), sol.dropped))
        log.info("iteration %d: p=%d dofs=%d e_a=%s", k, p, len(space), states[-1].e_a)
    return states, space


def _state(k, space, u, forms, errors, added, dropped) -> EnrichmentState:
    st = EnrichmentState(k, len(space), u, global_residual(u, forms), added=added,
                         dropped=list(dropped))
    if errors is not None:
        st.e_l2, st.e_a = errors(u)
    return st


def enrichment_counts(space: MultiscaleSpace, grid: Grid) -> np.ndarray:
    """Number of online bases per coarse node, shaped (ny+1, nx+1)."""
    counts = np.zeros(grid.n_nodes, dtype=int)
    for b in space.bases:
        if b.origin[0] == "online":
            counts[b.origin[1]] += 1
    return counts.reshape(grid.ny + 1, grid.nx + 1)

"""Experiment orchestration: configuration, reference solve, error metrics and output files."""
from __future__ import annotations

import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import Forms, assemble_forms, norms
from .grid import Grid, GridConfig, build_grid
from .medium import (FIELD_KINDS, PartitionOfUnity, PermeabilityField, compute_kappa_tilde,
                     constant_field, generate_field, load_field)
from .numkernel import solve_spd
from .offline import (AuxiliarySpace, MultiscaleSpace, build_auxiliary_space, build_cem_basis,
                      build_global_basis, build_offline_space)
from .online import AdaptiveConfig, EnrichmentState, enrichment_counts, run_adaptive

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


SOURCES: dict[str, Callable] = {
    "constant": lambda x, y: np.ones_like(x),
    "sin2d": lambda x, y: 2 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y),
    "radial_quarter": lambda x, y: ((x - 0.5) ** 2 + (y - 0.5) ** 2) ** -0.25,
}


@dataclass
class ExperimentConfig:
    coarse_n: int = 16
    fine_per_coarse: int = 16
    medium: str = "mixed"  # channels | inclusions | mixed | constant | file:<path>
    contrast: float = 1e4
    seed: int = 0
    gamma: float = 4.0
    n_aux: int = 2
    m_offline: int = 2
    m_online: int = 3
    theta: float = 0.0
    n_iter: int = 3
    source: str = "radial_quarter"
    out: str = "results"
    rtol: float = 1e-10
    pivot_tol: float = 1e-12
    eps_skip: float = 1e-12
    threads: int = 1
    write_maps: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.coarse_n < 1 or self.fine_per_coarse < 1:
            raise ConfigError("coarse_n and fine_per_coarse must be >= 1")
        if not 0 <= self.theta < 1:
            raise ConfigError("theta must lie in [0, 1)")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be >= 0")
        if self.n_aux < 1 or self.m_offline < 0 or self.m_online < 0:
            raise ConfigError("n_aux >= 1 and nonnegative oversampling layers required")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; choose from {sorted(SOURCES)}")
        if not (self.medium in FIELD_KINDS or self.medium == "constant"
                or self.medium.startswith("file:")):
            raise ConfigError(f"unknown medium {self.medium!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    # -- key=value text ----------------------------------------------------
    def dumps(self) -> str:
        buf = io.StringIO()
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            buf.write(f"{f.name}={v}\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base if base is not None else cls()
        return cfg.updated(parse_key_values(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def updated(self, values: dict[str, object]) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            if raw is None:
                continue
            kw[key] = _coerce(key, raw, getattr(self, key))
        return dataclasses.replace(self, **kw).validate()


def _coerce(key, raw, current):
    if not isinstance(raw, str):
        return type(current)(raw) if not isinstance(current, bool) else bool(raw)
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- pipeline pieces ---------------------------------------------------

def make_medium(cfg: ExperimentConfig, grid: Grid) -> PermeabilityField:
    if cfg.medium == "constant":
        return constant_field(grid, 1.0)
    if cfg.medium.startswith("file:"):
        return load_field(cfg.medium[5:], grid)
    return generate_field(cfg.medium, cfg.contrast, cfg.seed, grid)


@dataclass
class Problem:
    grid: Grid
    field: PermeabilityField
    pou: PartitionOfUnity
    forms: Forms


def build_problem(cfg: ExperimentConfig) -> Problem:
    grid = build_grid(GridConfig(cfg.coarse_n, cfg.coarse_n, cfg.fine_per_coarse,
                                 cfg.fine_per_coarse))
    fld = make_medium(cfg, grid)
    pou = PartitionOfUnity(grid)
    forms = assemble_forms(fld, grid, compute_kappa_tilde(fld, pou), SOURCES[cfg.source],
                           cfg.gamma)
    return Problem(grid, fld, pou, forms)


def solve_fine_reference(forms: Forms, tol: float = 1e-10) -> np.ndarray:
    return solve_spd(forms.A, forms.F, tol=tol, context="fine reference")


def compute_errors(u_ms: np.ndarray, u_h: np.ndarray, forms: Forms) -> tuple[float, float]:
    """Relative (L2, energy) errors of u_ms against the reference u_h."""
    a_ref, _, l2_ref = norms(u_h, forms)
    if a_ref == 0 or l2_ref == 0:
        raise ZeroDivisionError("reference solution has zero norm")
    a, _, l2 = norms(u_h - u_ms, forms)
    return l2 / l2_ref, a / a_ref


def compute_rate(errors: Sequence[float], ref_norm: float = 1.0, floor: float = 1e-13) -> float:
    """max_k ||e_{k+1}||_a^2 / ||e_k||_a^2 over successive energy errors.

    Ratios whose denominator falls below ``floor * ref_norm**2`` are skipped.
    """
    e = np.asarray(errors, dtype=float) ** 2
    ratios = [e[k + 1] / e[k] for k in range(len(e) - 1) if e[k] >= floor * ref_norm ** 2]
    if not ratios:
        raise ValueError("need at least two states with a nonzero predecessor error")
    return float(max(ratios))


@dataclass
class ResultsTable:
    rows: list[tuple[int, int, float, float, int]]  # k, dofs, e_l2, e_a, p_selected
    rate: float | None = None

    HEADER = "k,dofs,e_l2,e_a,p_selected"

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for k, dofs, el2, ea, p in self.rows:
            lines.append(f"{k},{dofs},{el2:.8e},{ea:.8e},{p}")
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        out = [f"{'k':>3} {'DOFs':>6} {'e_L2 (%)':>12} {'e_a (%)':>12}"]
        for k, dofs, el2, ea, _ in self.rows:
            out.append(f"{k:>3} {dofs:>6} {100 * el2:>12.6f} {100 * ea:>12.6f}")
        if self.rate is not None:
            out.append(f"convergence rate: {self.rate:.4f}")
        return "\n".join(out)


def table_from_states(states: Sequence[EnrichmentState]) -> ResultsTable:
    rows = [(s.k, s.space_size, float(s.e_l2), float(s.e_a), s.added) for s in states]
    rate = None
    if len(states) >= 2:
        try:
            rate = compute_rate([s.e_a for s in states])
        except ValueError:
            rate = None
    return ResultsTable(rows, rate)


@dataclass
class OfflineStage:
    problem: Problem
    u_h: np.ndarray
    aux: AuxiliarySpace
    space: MultiscaleSpace
    timings: dict = field(default_factory=dict)
    final_space: MultiscaleSpace | None = None


def run_offline(cfg: ExperimentConfig) -> OfflineStage:
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    t1 = time.perf_counter()
    u_h = solve_fine_reference(problem.forms, cfg.rtol)
    t2 = time.perf_counter()
    aux = build_auxiliary_space(problem.forms, cfg.n_aux, threads=cfg.threads)
    space = build_offline_space(problem.forms, aux, cfg.m_offline, threads=cfg.threads)
    t3 = time.perf_counter()
    return OfflineStage(problem, u_h, aux, space,
                        dict(assemble=t1 - t0, reference=t2 - t1, offline=t3 - t2))


def run_online(cfg: ExperimentConfig, stage: OfflineStage) -> list[EnrichmentState]:
    forms = stage.problem.forms
    acfg = AdaptiveConfig(theta=cfg.theta, n_iter=cfg.n_iter, m_online=cfg.m_online,
                          eps_skip=cfg.eps_skip, threads=cfg.threads)
    states, space = run_adaptive(acfg, forms, stage.aux, stage.problem.pou, stage.space,
                                 errors=lambda u: compute_errors(u, stage.u_h, forms))
    stage.final_space = space
    return states


def run_experiment(cfg: ExperimentConfig, write: bool = True,
                   stage: OfflineStage | None = None) -> ResultsTable:
    cfg.validate()
    stage = stage if stage is not None else run_offline(cfg)
    states = run_online(cfg, stage)
    table = table_from_states(states)
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(table.to_csv())
        (out / "config.txt").write_text(cfg.dumps())
        if cfg.write_maps:
            write_maps(out, stage, states)
    return table


# -- CSV grids -----------------------------------------------------------

def write_csv_grid(path: Path, values: np.ndarray) -> None:
    """Rows bottom to top, comma separated."""
    values = np.atleast_2d(values)
    path.write_text("\n".join(",".join(f"{v:.8e}" for v in row) for row in values) + "\n")


def write_maps(out: Path, stage: OfflineStage, states: Sequence[EnrichmentState]) -> None:
    grid = stage.problem.grid
    write_csv_grid(out / "permeability.csv", stage.problem.field.values)
    for s in states:
        if s.indicators is not None:
            write_csv_grid(out / f"indicators_k{s.k}.csv",
                           s.indicators.reshape(grid.ny + 1, grid.nx + 1))
    if stage.final_space is not None:
        write_csv_grid(out / "enrichment_counts.csv", enrichment_counts(stage.final_space, grid))


def write_block_field(path: str | Path, grid: Grid, vec: np.ndarray) -> None:
    """Nodal values of a DG function, one section per coarse block.

    Each section is a ``block i`` line followed by ``fy+1`` rows of ``fx+1``
    values (bottom row first); eliminated boundary nodes are written as 0.
    """
    with open(path, "w") as fh:
        fh.write(f"{grid.nx} {grid.ny} {grid.fx} {grid.fy}\n")
        for i in range(grid.n_elements):
            d = grid.dof[i]
            vals = np.where(d >= 0, np.asarray(vec)[np.maximum(d, 0)], 0.0)
            fh.write(f"block {i}\n")
            for row in vals:
                fh.write(" ".join(f"{v:.16e}" for v in row) + "\n")


# -- decay study -----------------------------------------------------------

def decay_study(forms: Forms, aux: AuxiliarySpace, block: int, mode: int,
                layers: Sequence[int]) -> list[tuple[int, float]]:
    """e(m) = ||psi_glo - psi_ms(m)||_a for each m."""
    n = forms.grid.total_dofs
    glo = build_global_basis(block, mode, forms, aux).vector(n)
    out = []
    for m in layers:
        loc = build_cem_basis(block, mode, m, forms, aux).vector(n)
        d = glo - loc
        out.append((int(m), float(np.sqrt(max(d @ (forms.A @ d), 0.0)))))
    return out


# -- manufactured-solution check ---------------------------------------------

_G3 = np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)])
_W3 = np.array([5.0, 8.0, 5.0]) / 18.0


def manufactured_errors(forms: Forms, u_h: np.ndarray, exact: Callable, grad: Callable
                        ) -> tuple[float, float]:
    """(L2 error, DG-norm error) of u_h against a continuous exact solution vanishing on the boundary.

    Volume integrals use 3x3 Gauss per fine cell; the jump part is exact
    because the exact solution has no jumps.
    """
    g = forms.grid
    cd = g.cell_dofs()
    coef = np.where(cd >= 0, u_h[np.maximum(cd, 0)], 0.0)  # (nb, fy, fx, 4)
    kap = g.blocks_view(forms.field.values)
    nb = g.n_elements
    x0, _, y0, _ = g.config.domain
    bx = (np.arange(nb) % g.nx)[:, None, None]
    by = (np.arange(nb) // g.nx)[:, None, None]
    cx = x0 + bx * g.Hx + np.arange(g.fx)[None, None, :] * g.hx
    cy = y0 + by * g.Hy + np.arange(g.fy)[None, :, None] * g.hy
    l2 = 0.0
    h1 = 0.0
    for xi, wx in zip(_G3, _W3):
        for eta, wy in zip(_G3, _W3):
            N = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])
            dx = np.array([-(1 - eta), (1 - eta), -eta, eta]) / g.hx
            dy = np.array([-(1 - xi), -xi, (1 - xi), xi]) / g.hy
            X = np.broadcast_to(cx + xi * g.hx, coef.shape[:3])
            Y = np.broadcast_to(cy + eta * g.hy, coef.shape[:3])
            w = wx * wy * g.hx * g.hy
            l2 += w * np.sum((exact(X, Y) - coef @ N) ** 2)
            gx, gy = grad(X, Y)
            h1 += w * np.sum(kap * ((gx - coef @ dx) ** 2 + (gy - coef @ dy) ** 2))
    jump = float(u_h @ (forms.edges.penalty @ u_h))
    return math.sqrt(l2), math.sqrt(h1 + jump)


def manufactured_study(levels: int = 3, coarse_n: int = 4, fine0: int = 4, gamma: float = 4.0
                       ) -> list[tuple[float, float, float]]:
    """Rows (fine cell side, L2 error, DG error) for u = sin(pi x) sin(pi y), kappa = 1."""
    exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    grad = lambda x, y: (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
                         np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))
    rows = []
    for lev in range(levels):
        f = fine0 * 2 ** lev
        grid = build_grid(GridConfig(coarse_n, coarse_n, f, f))
        fld = constant_field(grid)
        pou = PartitionOfUnity(grid)
        forms = assemble_forms(fld, grid, compute_kappa_tilde(fld, pou), SOURCES["sin2d"], gamma)
        u_h = solve_fine_reference(forms)
        el2, edg = manufactured_errors(forms, u_h, exact, grad)
        rows.append((1.0 / (coarse_n * f), el2, edg))
    return rows


def observed_orders(rows: Sequence[tuple[float, float, float]]) -> list[tuple[float, float]]:
    out = []
    for (h0, a0, b0), (h1, a1, b1) in zip(rows, rows[1:]):
        r = math.log(h0 / h1)
        out.append((math.log(a0 / a1) / r, math.log(b0 / b1) / r))
    return out

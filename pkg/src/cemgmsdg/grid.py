"""Two-level structured grid: coarse blocks refined into fine quads.

Everything is row-major. Coarse element ``i`` sits at column ``i % nx`` and
row ``i // nx``; coarse node ``k`` at column ``k % (nx+1)``, row
``k // (nx+1)``. Degrees of freedom live on fine nodes *per coarse block*:
a fine node lying on an interior coarse edge is duplicated once per adjacent
block, and fine nodes on the domain boundary carry no dof.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GridConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    coarse_nx: int = 16
    coarse_ny: int = 16
    fine_per_coarse_x: int = 16
    fine_per_coarse_y: int = 16
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        for name in ("coarse_nx", "coarse_ny", "fine_per_coarse_x", "fine_per_coarse_y"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise GridConfigError(f"{name} must be a positive integer, got {v!r}")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise GridConfigError(f"degenerate domain {self.domain}")


@dataclass(frozen=True)
class Edge:
    """A coarse edge. ``plus``/``minus`` are element indices; ``minus`` is -1 on the boundary.

    ``normal`` points from ``plus`` to ``minus`` (outward on the boundary).
    ``vertical`` edges are x = const.
    """

    index: int
    vertical: bool
    plus: int
    minus: int
    normal: tuple[float, float]
    start: tuple[float, float]
    length: float

    @property
    def boundary(self) -> bool:
        return self.minus < 0


@dataclass(frozen=True)
class Region:
    elements: tuple[int, ...]
    kind: str  # "block" | "neighborhood" | "domain"
    center: int
    layers: int


@dataclass
class Grid:
    config: GridConfig
    # dof[i, b, a] = global dof of fine node (a, b) of block i, or -1
    dof: np.ndarray
    edges: list[Edge]
    block_offsets: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    # -- sizes ---------------------------------------------------------
    @property
    def nx(self) -> int:
        return self.config.coarse_nx

    @property
    def ny(self) -> int:
        return self.config.coarse_ny

    @property
    def fx(self) -> int:
        return self.config.fine_per_coarse_x

    @property
    def fy(self) -> int:
        return self.config.fine_per_coarse_y

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def fine_shape(self) -> tuple[int, int]:
        """(rows, cols) of the global fine-cell array."""
        return self.ny * self.fy, self.nx * self.fx

    @property
    def total_dofs(self) -> int:
        return int(self.block_offsets[-1])

    @property
    def Hx(self) -> float:
        x0, x1, _, _ = self.config.domain
        return (x1 - x0) / self.nx

    @property
    def Hy(self) -> float:
        _, _, y0, y1 = self.config.domain
        return (y1 - y0) / self.ny

    @property
    def hx(self) -> float:
        return self.Hx / self.fx

    @property
    def hy(self) -> float:
        return self.Hy / self.fy

    @property
    def H(self) -> float:
        return math.hypot(self.Hx, self.Hy)

    @property
    def h(self) -> float:
        return math.hypot(self.hx, self.hy)

    # -- coarse topology -----------------------------------------------
    def element_ij(self, i: int) -> tuple[int, int]:
        return i % self.nx, i // self.nx

    def element_extent(self, i: int) -> tuple[float, float, float, float]:
        bx, by = self.element_ij(i)
        x0, _, y0, _ = self.config.domain
        return (x0 + bx * self.Hx, x0 + (bx + 1) * self.Hx,
                y0 + by * self.Hy, y0 + (by + 1) * self.Hy)

    def node_xy(self, k: int) -> tuple[float, float]:
        x0, _, y0, _ = self.config.domain
        return x0 + (k % (self.nx + 1)) * self.Hx, y0 + (k // (self.nx + 1)) * self.Hy

    def neighborhood(self, k: int) -> tuple[int, ...]:
        """Coarse elements containing coarse node ``k``."""
        self._check_node(k)
        cx, cy = k % (self.nx + 1), k // (self.nx + 1)
        out = [by * self.nx + bx
               for by in (cy - 1, cy) for bx in (cx - 1, cx)
               if 0 <= bx < self.nx and 0 <= by < self.ny]
        return tuple(sorted(out))

    def _check_element(self, i: int):
        if not 0 <= i < self.n_elements:
            raise IndexError(f"element index {i} out of range [0, {self.n_elements})")

    def _check_node(self, k: int):
        if not 0 <= k < self.n_nodes:
            raise IndexError(f"node index {k} out of range [0, {self.n_nodes})")

    def _dilate(self, elements: set[int]) -> set[int]:
        # vertex adjacency: K touches the set iff it lies in the 3x3 stencil of a member
        out = set()
        for e in elements:
            bx, by = self.element_ij(e)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    x, y = bx + dx, by + dy
                    if 0 <= x < self.nx and 0 <= y < self.ny:
                        out.add(y * self.nx + x)
        return out

    def oversample_block(self, i: int, m: int) -> Region:
        self._check_element(i)
        if m < 0:
            raise ValueError("layer count must be nonnegative")
        els = {i}
        for _ in range(m):
            els = self._dilate(els)
        return Region(tuple(sorted(els)), "block", i, m)

    def oversample_neighborhood(self, k: int, m: int) -> Region:
        if m < 0:
            raise ValueError("layer count must be nonnegative")
        els = set(self.neighborhood(k))
        for _ in range(m):
            els = self._dilate(els)
        return Region(tuple(sorted(els)), "neighborhood", k, m)

    def whole(self) -> Region:
        return Region(tuple(range(self.n_elements)), "domain", -1, -1)

    # -- dof maps ------------------------------------------------------
    def block_dofs(self, i: int) -> np.ndarray:
        return np.arange(self.block_offsets[i], self.block_offsets[i + 1])

    def region_dofs(self, region: Region | tuple[int, ...]) -> np.ndarray:
        els = region.elements if isinstance(region, Region) else tuple(region)
        if not els:
            raise ValueError("empty region")
        key = ("dofs", els)
        hit = self._cache.get(key)
        if hit is None:
            # blocks are numbered contiguously, so sorted blocks give sorted dofs
            hit = np.concatenate([self.block_dofs(e) for e in sorted(set(els))])
            if len(self._cache) < 4096:
                self._cache[key] = hit
        return hit

    def dof_coordinates(self) -> np.ndarray:
        """(total_dofs, 2) physical coordinates of every dof."""
        nb = self.n_elements
        a = np.arange(self.fx + 1)
        b = np.arange(self.fy + 1)
        bx = np.arange(nb) % self.nx
        by = np.arange(nb) // self.nx
        x0, _, y0, _ = self.config.domain
        X = x0 + bx[:, None, None] * self.Hx + a[None, None, :] * self.hx
        Y = y0 + by[:, None, None] * self.Hy + b[None, :, None] * self.hy
        X = np.broadcast_to(X, self.dof.shape)
        Y = np.broadcast_to(Y, self.dof.shape)
        mask = self.dof >= 0
        out = np.empty((self.total_dofs, 2))
        out[self.dof[mask], 0] = X[mask]
        out[self.dof[mask], 1] = Y[mask]
        return out

    def cell_dofs(self) -> np.ndarray:
        """(n_blocks, fy, fx, 4) dof indices of each fine cell's corners.

        Corner order: (0,0), (1,0), (0,1), (1,1) in local (x, y).
        """
        d = self.dof
        return np.stack([d[:, :-1, :-1], d[:, :-1, 1:], d[:, 1:, :-1], d[:, 1:, 1:]], axis=-1)

    def block_cells(self, i: int) -> tuple[slice, slice]:
        """Slices into the global (rows, cols) fine-cell array covering block ``i``."""
        bx, by = self.element_ij(i)
        return slice(by * self.fy, (by + 1) * self.fy), slice(bx * self.fx, (bx + 1) * self.fx)

    def blocks_view(self, cellvals: np.ndarray) -> np.ndarray:
        """Reshape a global (rows, cols) fine-cell array to (n_blocks, fy, fx)."""
        v = np.asarray(cellvals).reshape(self.ny, self.fy, self.nx, self.fx)
        return v.transpose(0, 2, 1, 3).reshape(self.n_elements, self.fy, self.fx)


def _build_edges(cfg: GridConfig, Hx: float, Hy: float) -> list[Edge]:
    nx, ny = cfg.coarse_nx, cfg.coarse_ny
    x0, _, y0, _ = cfg.domain
    edges: list[Edge] = []
    # vertical edges, row-major over (row, column of x-lines)
    for by in range(ny):
        for cx in range(nx + 1):
            start = (x0 + cx * Hx, y0 + by * Hy)
            if cx == 0:
                plus, minus, n = by * nx, -1, (-1.0, 0.0)
            elif cx == nx:
                plus, minus, n = by * nx + nx - 1, -1, (1.0, 0.0)
            else:
                plus, minus, n = by * nx + cx - 1, by * nx + cx, (1.0, 0.0)
            edges.append(Edge(len(edges), True, plus, minus, n, start, Hy))
    for cy in range(ny + 1):
        for bx in range(nx):
            start = (x0 + bx * Hx, y0 + cy * Hy)
            if cy == 0:
                plus, minus, n = bx, -1, (0.0, -1.0)
            elif cy == ny:
                plus, minus, n = (ny - 1) * nx + bx, -1, (0.0, 1.0)
            else:
                plus, minus, n = (cy - 1) * nx + bx, cy * nx + bx, (0.0, 1.0)
            edges.append(Edge(len(edges), False, plus, minus, n, start, Hx))
    return edges


def build_grid(config: GridConfig | None = None, **kw) -> Grid:
    cfg = config if config is not None else GridConfig(**kw)
    nx, ny, fx, fy = cfg.coarse_nx, cfg.coarse_ny, cfg.fine_per_coarse_x, cfg.fine_per_coarse_y
    nb = nx * ny
    bx = np.arange(nb) % nx
    by = np.arange(nb) // nx
    a = np.arange(fx + 1)
    b = np.arange(fy + 1)
    on_left = (bx[:, None, None] == 0) & (a[None, None, :] == 0)
    on_right = (bx[:, None, None] == nx - 1) & (a[None, None, :] == fx)
    on_bot = (by[:, None, None] == 0) & (b[None, :, None] == 0)
    on_top = (by[:, None, None] == ny - 1) & (b[None, :, None] == fy)
    boundary = on_left | on_right | on_bot | on_top
    free = ~boundary
    dof = np.full(free.shape, -1, dtype=np.int64)
    dof[free] = np.arange(int(free.sum()))
    counts = free.reshape(nb, -1).sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    Hx = (cfg.domain[1] - cfg.domain[0]) / nx
    Hy = (cfg.domain[3] - cfg.domain[2]) / ny
    return Grid(cfg, dof, _build_edges(cfg, Hx, Hy), offsets)

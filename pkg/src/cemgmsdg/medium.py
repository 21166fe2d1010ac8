"""Permeability fields, the coarse bilinear partition of unity and the weight field kappa-tilde."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid


class FieldFileError(ValueError):
    """Base class for malformed permeability files."""


class FieldParseError(FieldFileError):
    pass


class FieldDimensionError(FieldFileError):
    pass


class NonpositivePermeabilityError(FieldFileError):
    pass


@dataclass(frozen=True)
class PermeabilityField:
    values: np.ndarray  # (rows, cols) over the global fine grid, row 0 at the bottom
    description: str = ""

    @property
    def kmin(self) -> float:
        return float(self.values.min())

    @property
    def kmax(self) -> float:
        return float(self.values.max())

    def scaled(self, c: float) -> "PermeabilityField":
        return PermeabilityField(self.values * c, f"{self.description} x{c}")


def constant_field(grid: Grid, value: float = 1.0) -> PermeabilityField:
    return PermeabilityField(np.full(grid.fine_shape, float(value)), f"constant {value}")


def load_field(path: str | Path, grid: Grid) -> PermeabilityField:
    """Read the plain-text field format: ``nx ny`` then ``ny`` rows of ``nx`` values, bottom row first."""
    path = Path(path)
    try:
        lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
        nx, ny = (int(t) for t in lines[0])
        rows = [[float(t) for t in ln] for ln in lines[1:]]
    except (ValueError, IndexError) as exc:
        raise FieldParseError(f"{path}: cannot parse field file ({exc})") from exc
    want_rows, want_cols = grid.fine_shape
    if (ny, nx) != (want_rows, want_cols):
        raise FieldDimensionError(
            f"{path}: header says {nx}x{ny}, fine grid is {want_cols}x{want_rows}")
    if len(rows) != ny or any(len(r) != nx for r in rows):
        raise FieldDimensionError(f"{path}: expected {ny} rows of {nx} values")
    vals = np.array(rows, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FieldParseError(f"{path}: non-finite permeability value")
    if np.any(vals <= 0):
        raise NonpositivePermeabilityError(f"{path}: nonpositive permeability")
    return PermeabilityField(vals, f"file {path}")


def save_field(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


FIELD_KINDS = ("channels", "inclusions", "mixed")


def _add_channels(mask: np.ndarray, rng: np.random.Generator, count: int) -> None:
    rows, cols = mask.shape
    for n in range(count):
        horizontal = n % 2 == 0
        along, across = (cols, rows) if horizontal else (rows, cols)
        width = int(rng.integers(2, 7))
        pos = int(rng.integers(0, across - width + 1)) if across > width else 0
        length = int(rng.integers(along // 2, along + 1))
        start = int(rng.integers(0, along - length + 1))
        if horizontal:
            mask[pos:pos + width, start:start + length] = True
        else:
            mask[start:start + length, pos:pos + width] = True


def _add_inclusions(mask: np.ndarray, rng: np.random.Generator, count: int) -> None:
    rows, cols = mask.shape
    for _ in range(count):
        w = min(int(rng.integers(2, 9)), cols)
        h = min(int(rng.integers(2, 9)), rows)
        c = int(rng.integers(0, cols - w + 1))
        r = int(rng.integers(0, rows - h + 1))
        mask[r:r + h, c:c + w] = True


def generate_field(kind: str, contrast: float, seed: int, grid: Grid) -> PermeabilityField:
    """Binary high-contrast medium: background 1, features ``contrast``.

    Randomness comes from ``numpy.random.Generator(PCG64(seed))``. Channels are
    axis-parallel strips 2-6 fine cells wide spanning at least half the
    domain, alternating horizontal/vertical; inclusions are rectangles with
    2-8 fine cells per side. Counts scale with the fine grid size.
    """
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}; expected one of {FIELD_KINDS}")
    if not contrast >= 1:
        raise ValueError("contrast must be >= 1")
    rows, cols = grid.fine_shape
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    mask = np.zeros((rows, cols), dtype=bool)
    n_channels = max(2, (rows + cols) // 64)
    n_incl = max(1, rows * cols // 2048)
    if kind == "channels":
        _add_channels(mask, rng, n_channels)
    elif kind == "inclusions":
        _add_inclusions(mask, rng, n_incl)
    else:
        _add_channels(mask, rng, max(2, n_channels // 2))
        _add_inclusions(mask, rng, n_incl)
    vals = np.where(mask, float(contrast), 1.0)
    return PermeabilityField(vals, f"{kind} contrast={contrast:g} seed={seed}")


# -- partition of unity ------------------------------------------------

def _hat_local(xi, eta):
    """Values of the four coarse-cell hats at local coords (xi, eta) in [0,1]^2.

    Order: nodes (0,0), (1,0), (0,1), (1,1).
    """
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta], axis=-1)


def _hat_local_grad(xi, eta, Hx, Hy):
    gx = np.stack([-(1 - eta), (1 - eta), -eta, eta], axis=-1) / Hx
    gy = np.stack([-(1 - xi), -xi, (1 - xi), xi], axis=-1) / Hy
    return gx, gy


class PartitionOfUnity:
    """Standard bilinear hats on the coarse grid, sampled on the fine grid."""

    def __init__(self, grid: Grid):
        self.grid = grid

    def block_corner_nodes(self, i: int) -> tuple[int, int, int, int]:
        g = self.grid
        bx, by = g.element_ij(i)
        n0 = by * (g.nx + 1) + bx
        return n0, n0 + 1, n0 + g.nx + 1, n0 + g.nx + 2

    def nodal_values(self, k: int) -> np.ndarray:
        """chi_k at every dof (fine node of every block)."""
        g = self.grid
        out = np.zeros(g.total_dofs)
        xi = np.arange(g.fx + 1) / g.fx
        eta = np.arange(g.fy + 1) / g.fy
        vals = _hat_local(xi[None, :], eta[:, None])  # (fy+1, fx+1, 4)
        for e in g.neighborhood(k):
            corner = self.block_corner_nodes(e).index(k)
            d = g.dof[e]
            mask = d >= 0
            out[d[mask]] = vals[..., corner][mask]
        return out

    def fine_node_grid(self, k: int) -> np.ndarray:
        """chi_k on the global (continuous) fine node lattice, shape (rows+1, cols+1)."""
        g = self.grid
        rows, cols = g.fine_shape
        x = np.arange(cols + 1) / g.fx
        y = np.arange(rows + 1) / g.fy
        cx, cy = k % (g.nx + 1), k // (g.nx + 1)
        hx = np.clip(1 - np.abs(x - cx), 0, None)
        hy = np.clip(1 - np.abs(y - cy), 0, None)
        return hy[:, None] * hx[None, :]

    def grad_sq_sum_at_centers(self) -> np.ndarray:
        """sum_j |grad chi_j|^2 at every fine-cell center, shape (rows, cols)."""
        g = self.grid
        xi = (np.arange(g.fx) + 0.5) / g.fx
        eta = (np.arange(g.fy) + 0.5) / g.fy
        gx, gy = _hat_local_grad(xi[None, :], eta[:, None], g.Hx, g.Hy)
        local = (gx ** 2 + gy ** 2).sum(axis=-1)  # (fy, fx), same in every block
        return np.tile(local, (g.ny, g.nx))


def compute_kappa_tilde(field: PermeabilityField, pou: PartitionOfUnity) -> np.ndarray:
    return field.values * pou.grad_sq_sum_at_centers()

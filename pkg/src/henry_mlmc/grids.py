"""Nested space and time grids for the Henry rectangle [0, 2] x [-1, 0].

Level ``l`` has ``16 * 4**l`` by ``8 * 4**l`` square elements and
``94 * 4**l`` implicit Euler steps over 6016 s.  Every level is obtained
from the previous one by two uniform bisections, so the same machinery also
provides the intermediate bisection grids used inside the multigrid cycle.

Vertices are numbered lexicographically with x running fastest::

    v = j * (nx + 1) + i,   x_i = i * hx,   y_j = -1 + j * hy
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

NX0, NY0 = 16, 8
R0 = 94
T_END = 6016.0
L_MAX = 3
X_MIN, X_MAX = 0.0, 2.0
Y_MIN, Y_MAX = -1.0, 0.0
DOMAIN_AREA = (X_MAX - X_MIN) * (Y_MAX - Y_MIN)


class GridError(ValueError):
    pass


def _check_level(level, max_level):
    if int(level) != level or level < 0:
        raise GridError(f"grid level must be a non-negative integer, got {level!r}")
    if level > max_level:
        raise GridError(f"grid level {level} exceeds the configured maximum {max_level}")


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    """Tensor-product quadrilateral grid with its vertex-centred dual.

    ``level`` counts full refinement levels (x4 per axis); ``bisections``
    counts single bisections from the 16 x 8 base grid, so
    ``bisections == 2 * level`` for every grid of the MLMC hierarchy.
    """

    nx: int
    ny: int
    level: int | None = None
    bisections: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def hx(self) -> float:
        return (X_MAX - X_MIN) / self.nx

    @property
    def hy(self) -> float:
        return (Y_MAX - Y_MIN) / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, columns) = (ny + 1, nx + 1) for reshaping vertex arrays."""
        return self.ny + 1, self.nx + 1

    @property
    def n_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @cached_property
    def x(self) -> np.ndarray:
        return X_MIN + np.arange(self.nx + 1) * self.hx

    @cached_property
    def y(self) -> np.ndarray:
        return Y_MIN + np.arange(self.ny + 1) * self.hy

    @cached_property
    def vertices(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def boundary(self) -> dict[str, np.ndarray]:
        """Vertex indices on the four sides (corners belong to two sides)."""
        idx = np.arange(self.n_vertices).reshape(self.shape)
        return {
            "left": idx[:, 0].copy(),
            "right": idx[:, -1].copy(),
            "bottom": idx[0, :].copy(),
            "top": idx[-1, :].copy(),
        }

    @cached_property
    def cv_widths(self) -> tuple[np.ndarray, np.ndarray]:
        wx = np.full(self.nx + 1, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny + 1, self.hy)
        wy[[0, -1]] *= 0.5
        return wx, wy

    @cached_property
    def cv_areas(self) -> np.ndarray:
        """Areas of the box control volumes, one per vertex."""
        wx, wy = self.cv_widths
        return np.outer(wy, wx).ravel()

    def control_volume(self, v: int) -> "ControlVolume":
        """Box control volume of vertex ``v`` with its dual faces."""
        j, i = divmod(int(v), self.nx + 1)
        x0 = max(self.x[i] - 0.5 * self.hx, X_MIN)
        x1 = min(self.x[i] + 0.5 * self.hx, X_MAX)
        y0 = max(self.y[j] - 0.5 * self.hy, Y_MIN)
        y1 = min(self.y[j] + 0.5 * self.hy, Y_MAX)
        faces = []
        for di, dj, normal, length in ((1, 0, (1.0, 0.0), y1 - y0),
                                       (-1, 0, (-1.0, 0.0), y1 - y0),
                                       (0, 1, (0.0, 1.0), x1 - x0),
                                       (0, -1, (0.0, -1.0), x1 - x0)):
            ii, jj = i + di, j + dj
            if 0 <= ii <= self.nx and 0 <= jj <= self.ny:
                faces.append(DualFace(jj * (self.nx + 1) + ii, normal, length))
        return ControlVolume(int(v), (x1 - x0) * (y1 - y0), (x0, x1, y0, y1), tuple(faces))

    def locate(self, x: float, y: float) -> int:
        """Index of the vertex nearest to (x, y)."""
        i = int(np.clip(np.rint((x - X_MIN) / self.hx), 0, self.nx))
        j = int(np.clip(np.rint((y - Y_MIN) / self.hy), 0, self.ny))
        return j * (self.nx + 1) + i

    def clipped_cv_weights(self, box: tuple[float, float, float, float]) -> np.ndarray:
        """Area of every control volume intersected with ``box = (x0, x1, y0, y1)``."""
        x0, x1, y0, y1 = box
        wx, wy = self.cv_widths
        lo_x = np.maximum(self.x - 0.5 * self.hx, X_MIN)
        hi_x = lo_x + wx
        lo_y = np.maximum(self.y - 0.5 * self.hy, Y_MIN)
        hi_y = lo_y + wy
        ox = np.clip(np.minimum(hi_x, x1) - np.maximum(lo_x, x0), 0.0, None)
        oy = np.clip(np.minimum(hi_y, y1) - np.maximum(lo_y, y0), 0.0, None)
        return np.outer(oy, ox).ravel()

    def coarsened(self) -> "StructuredGrid":
        """The grid one bisection coarser (used by the multigrid hierarchy)."""
        if self.nx % 2 or self.ny % 2 or self.bisections == 0:
            raise GridError("grid cannot be coarsened below the 16 x 8 base grid")
        b = self.bisections - 1
        return StructuredGrid(self.nx // 2, self.ny // 2, level=b // 2 if b % 2 == 0 else None,
                              bisections=b)

    def metadata(self) -> dict:
        return {"level": self.level, "nx": self.nx, "ny": self.ny,
                "hx": self.hx, "hy": self.hy, "n_vertices": self.n_vertices}

    def to_json(self) -> str:
        return json.dumps(self.metadata(), indent=2)


@dataclass(frozen=True)
class DualFace:
    neighbor: int
    normal: tuple[float, float]
    length: float


@dataclass(frozen=True)
class ControlVolume:
    vertex: int
    area: float
    bounds: tuple[float, float, float, float]
    faces: tuple[DualFace, ...]


@dataclass(frozen=True)
class TimeGrid:
    level: int
    r: int
    tau: float
    T: float = T_END

    @property
    def times(self) -> np.ndarray:
        """Output times k * tau for k = 1..r (t = 0 is the initial state)."""
        return np.arange(1, self.r + 1) * self.tau


_GRIDS: dict[int, StructuredGrid] = {}


def build_grid(level: int, max_level: int = L_MAX) -> StructuredGrid:
    """Spatial grid of MLMC level ``level``; grids are shared immutable objects."""
    _check_level(level, max_level)
    level = int(level)
    if level not in _GRIDS:
        _GRIDS[level] = StructuredGrid(NX0 * 4**level, NY0 * 4**level,
                                       level=level, bisections=2 * level)
    return _GRIDS[level]


def build_time_grid(level: int, max_level: int = L_MAX) -> TimeGrid:
    _check_level(level, max_level)
    r = R0 * 4 ** int(level)
    return TimeGrid(int(level), r, T_END / r)


def multigrid_hierarchy(grid: StructuredGrid) -> list[StructuredGrid]:
    """Bisection hierarchy from ``grid`` down to the 16 x 8 base grid, finest first."""
    grids = [grid]
    while grids[-1].bisections > 0:
        grids.append(grids[-1].coarsened())
    return grids


def _interp_1d(n_coarse: int, ratio: int) -> sp.csr_matrix:
    n_fine = n_coarse * ratio
    rows, cols, vals = [], [], []
    for k in range(n_fine + 1):
        i, rem = divmod(k, ratio)
        if rem == 0:
            rows.append(k); cols.append(i); vals.append(1.0)
        else:
            w = rem / ratio
            rows += [k, k]; cols += [i, i + 1]; vals += [1.0 - w, w]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_fine + 1, n_coarse + 1))


def interpolation_matrix(coarse: StructuredGrid, fine: StructuredGrid) -> sp.csr_matrix:
    """Bilinear interpolation from ``coarse`` vertices to ``fine`` vertices."""
    ratio = fine.nx // coarse.nx
    if ratio < 1 or fine.nx != ratio * coarse.nx or fine.ny != ratio * coarse.ny:
        raise GridError("grids are not nested by a common integer ratio")
    key = ("P", coarse.nx, coarse.ny, fine.nx)
    cache = fine._cache
    if key not in cache:
        px = _interp_1d(coarse.nx, ratio)
        py = _interp_1d(coarse.ny, ratio)
        # x runs fastest, so the y factor comes first in the Kronecker product
        cache[key] = sp.kron(py, px, format="csr")
    return cache[key]


def _check_size(field, grid, what):
    field = np.asarray(field, dtype=float)
    if field.shape != (grid.n_vertices,):
        raise GridError(f"{what} has shape {field.shape}, expected ({grid.n_vertices},)")
    return field


def prolong(coarse_field, level: int) -> np.ndarray:
    """Bilinear interpolation of a level-``level`` vertex field onto level ``level + 1``."""
    coarse = build_grid(level)
    fine = build_grid(level + 1)
    u = _check_size(coarse_field, coarse, "coarse field")
    return interpolation_matrix(coarse, fine) @ u


def restriction_matrix(coarse: StructuredGrid, fine: StructuredGrid) -> sp.csr_matrix:
    """Full-weighting restriction ``M_c^-1 P^T M_f``.

    This is the adjoint of bilinear prolongation ``P`` with respect to the
    control-volume weighted inner products, i.e. sigma = 1 in
    ``<R u, v>_coarse = sigma * <u, P v>_fine``.  Away from the boundary it
    reduces to ``P^T / ratio**2``.
    """
    key = ("R", coarse.nx, coarse.ny, fine.nx)
    cache = fine._cache
    if key not in cache:
        P = interpolation_matrix(coarse, fine)
        Mc_inv = sp.diags(1.0 / coarse.cv_areas)
        cache[key] = (Mc_inv @ P.T @ sp.diags(fine.cv_areas)).tocsr()
    return cache[key]


def restrict(fine_field, level: int) -> np.ndarray:
    """Full-weighting restriction of a level-``level`` field onto level ``level - 1``."""
    if level < 1:
        raise GridError("cannot restrict below level 0")
    fine = build_grid(level)
    coarse = build_grid(level - 1)
    u = _check_size(fine_field, fine, "fine field")
    return restriction_matrix(coarse, fine) @ u


def inject(fine_field, fine: StructuredGrid, coarse: StructuredGrid) -> np.ndarray:
    """Values of a fine field at the vertices shared with ``coarse``."""
    ratio = fine.nx // coarse.nx
    u = _check_size(fine_field, fine, "fine field").reshape(fine.shape)
    return u[::ratio, ::ratio].ravel().copy()

"""Quantities of interest: salt integral, freshwater area and 15 subdomain salt masses.

All mass-type integrals use the lumped control-volume rule ``sum f_v |CV_v|``,
which on a uniform tensor grid equals the exact integral of the bilinear
interpolant of the vertex values.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .grids import build_grid, build_time_grid, X_MIN, X_MAX, Y_MIN, Y_MAX
from .inputs import DEFAULT_PARAMS, HenryParameters

SUBDOMAIN_CENTRES = np.array([
    (0.90, -0.95), (1.15, -0.95), (1.40, -0.95), (1.65, -0.95), (1.90, -0.95),
    (0.90, -0.75), (1.15, -0.75), (1.40, -0.75), (1.65, -0.75), (1.90, -0.75),
    (0.90, -0.50), (1.15, -0.50), (1.40, -0.50), (1.65, -0.50), (1.90, -0.50),
])
SUBDOMAIN_HALF_WIDTH = 0.1
N_SUBDOMAINS = len(SUBDOMAIN_CENTRES)


def subdomain_box(i: int) -> tuple[float, float, float, float]:
    """``(x0, x1, y0, y1)`` of subdomain ``i`` (1-based), intersected with the domain."""
    _check_index(i)
    x, y = SUBDOMAIN_CENTRES[i - 1]
    h = SUBDOMAIN_HALF_WIDTH
    return (max(x - h, X_MIN), min(x + h, X_MAX), max(y - h, Y_MIN), min(y + h, Y_MAX))


def subdomain_area(i: int) -> float:
    x0, x1, y0, y1 = subdomain_box(i)
    return (x1 - x0) * (y1 - y0)


def _check_index(i):
    if isinstance(i, bool) or int(i) != i or not 1 <= i <= N_SUBDOMAINS:
        raise ValueError(f"subdomain index must be in 1..{N_SUBDOMAINS}, got {i!r}")


@dataclass(frozen=True)
class QoiKind:
    """``salt`` (Q_S), ``freshwater`` (Q_FW), ``subdomain`` (Q_i) or ``point`` (P_i, diagnostic)."""

    kind: str
    index: int | None = None

    def __post_init__(self):
        if self.kind in ("subdomain", "point"):
            _check_index(self.index)
        elif self.kind in ("salt", "freshwater"):
            if self.index is not None:
                raise ValueError(f"{self.kind} takes no index")
        else:
            raise ValueError(f"unknown QoI kind {self.kind!r}")

    @property
    def name(self) -> str:
        return {"salt": "Q_S", "freshwater": "Q_FW"}.get(
            self.kind, f"{'Q' if self.kind == 'subdomain' else 'P'}_{self.index}")

    @classmethod
    def parse(cls, name: str) -> "QoiKind":
        if name == "Q_S":
            return cls("salt")
        if name == "Q_FW":
            return cls("freshwater")
        m = re.fullmatch(r"([QP])_(\d+)", name)
        if not m:
            raise ValueError(f"cannot parse QoI name {name!r}")
        return cls("subdomain" if m.group(1) == "Q" else "point", int(m.group(2)))

    def __str__(self):
        return self.name


SALT = QoiKind("salt")
FRESHWATER = QoiKind("freshwater")
ALL_QOIS = ([SALT, FRESHWATER] + [QoiKind("subdomain", i) for i in range(1, 16)]
            + [QoiKind("point", i) for i in range(1, 16)])
QOI_NAMES = [q.name for q in ALL_QOIS]


def _grid_of(state):
    return build_grid(state.level, max(state.level, 0))


def _check_state(state, grid):
    if state.c.shape != (grid.n_vertices,):
        raise ValueError(f"state has {state.c.size} vertices, level {state.level} grid has "
                         f"{grid.n_vertices}")


def salt_density(c, params: HenryParameters = DEFAULT_PARAMS):
    """Salt mass per volume ``c * rho(c)``."""
    c = np.asarray(c, dtype=float)
    return c * (params.rho0 + params.drho * c)


def salt_integral(state, params: HenryParameters = DEFAULT_PARAMS) -> float:
    """Q_S = integral of c rho(c) over the domain (kg per metre depth)."""
    grid = _grid_of(state)
    _check_state(state, grid)
    return float(grid.cv_areas @ salt_density(state.c, params))


def freshwater_integral(state, params: HenryParameters = DEFAULT_PARAMS) -> float:
    """Q_FW = area (m^2) of the control volumes whose vertex value is c <= threshold."""
    grid = _grid_of(state)
    _check_state(state, grid)
    return float(grid.cv_areas @ (state.c <= params.fw_threshold))


def subdomain_weights(grid, i: int) -> np.ndarray:
    key = ("subdomain", i)
    if key not in grid._cache:
        grid._cache[key] = grid.clipped_cv_weights(subdomain_box(i))
    return grid._cache[key]


def subdomain_mass(state, i: int, params: HenryParameters = DEFAULT_PARAMS) -> float:
    """Q_i = integral of c rho(c) over subdomain ``i`` with control volumes clipped to it."""
    _check_index(i)
    grid = _grid_of(state)
    _check_state(state, grid)
    return float(subdomain_weights(grid, i) @ salt_density(state.c, params))


def point_value(state, i: int) -> float:
    """Mass fraction at the grid vertex nearest to centre ``i`` (diagnostic only)."""
    _check_index(i)
    grid = _grid_of(state)
    return float(state.c[grid.locate(*SUBDOMAIN_CENTRES[i - 1])])


def evaluate(state, kind: QoiKind, params: HenryParameters = DEFAULT_PARAMS) -> float:
    if kind.kind == "salt":
        return salt_integral(state, params)
    if kind.kind == "freshwater":
        return freshwater_integral(state, params)
    if kind.kind == "subdomain":
        return subdomain_mass(state, kind.index, params)
    return point_value(state, kind.index)


@dataclass
class QoiSeries:
    kind: QoiKind
    level: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("QoI values must be finite")

    def at(self, t: float) -> float:
        k = np.flatnonzero(self.times == t)
        if k.size != 1:
            raise KeyError(f"t = {t} is not an output time of this series")
        return float(self.values[k[0]])


def align_to_coarse(series: QoiSeries, level_coarse: int) -> QoiSeries:
    """Subsample a series at the time points of a coarser (or the same) level."""
    if level_coarse > series.level or level_coarse < 0:
        raise ValueError(f"cannot align a level-{series.level} series to level {level_coarse}")
    fine_tg = build_time_grid(series.level, series.level)
    if series.times.size != fine_tg.r or not np.array_equal(series.times, fine_tg.times):
        raise ValueError("series does not cover the full time grid of its level")
    ratio = 4 ** (series.level - level_coarse)
    idx = np.arange(ratio - 1, series.times.size, ratio)
    coarse_times = build_time_grid(level_coarse, level_coarse).times
    if not np.array_equal(series.times[idx], coarse_times):
        raise ValueError("fine and coarse time grids are not nested")
    return QoiSeries(series.kind, level_coarse, series.times[idx].copy(),
                     series.values[idx].copy())


class QoiRecorder:
    """Observer that evaluates every QoI after each accepted step.

    ``values`` is an ``(n_steps, len(QOI_NAMES))`` array in :data:`QOI_NAMES`
    column order; it also tracks the largest |Q_i| seen.
    """

    def __init__(self, level: int, params: HenryParameters = DEFAULT_PARAMS):
        self.level = level
        self.params = params
        grid = build_grid(level, level)
        self.grid = grid
        self.W = np.vstack([grid.cv_areas] + [subdomain_weights(grid, i) for i in range(1, 16)])
        self.point_idx = np.array([grid.locate(*xy) for xy in SUBDOMAIN_CENTRES])
        self.times: list[float] = []
        self.rows: list[np.ndarray] = []

    def __call__(self, state):
        rc = salt_density(state.c, self.params)
        masses = self.W @ rc
        fw = self.grid.cv_areas @ (state.c <= self.params.fw_threshold)
        row = np.concatenate([[masses[0], fw], masses[1:], state.c[self.point_idx]])
        self.times.append(state.t)
        self.rows.append(row)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.rows).reshape(len(self.rows), len(QOI_NAMES))

    def series(self, kind: QoiKind | str) -> QoiSeries:
        name = kind if isinstance(kind, str) else kind.name
        j = QOI_NAMES.index(name)
        return QoiSeries(QoiKind.parse(name), self.level, np.array(self.times),
                         self.values[:, j])

    def all_series(self) -> dict[str, QoiSeries]:
        return {n: self.series(n) for n in QOI_NAMES}

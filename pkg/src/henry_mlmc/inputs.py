"""Random inputs: the vector xi, the two-layer porosity field, Kozeny-Carman
permeability and the periodic uncertain recharge.

All fields are pure functions of position (and time) so they can be evaluated
directly at whatever integration points a grid level uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class HenryParameters:
    phi_hat: float = 0.35
    D: float = 18.8571e-6
    K_hat: float = 1.020408e-9
    rho0: float = 1000.0
    rho1: float = 1024.99
    mu: float = 1e-3
    kappa_KC: float = 2.088415e-8
    gravity: tuple[float, float] = (0.0, -9.8)
    q_base: float = 6.6e-2
    fw_threshold: float = 0.012178
    phi_min: float = 0.01
    phi_max: float = 0.99

    def __post_init__(self):
        for name in ("phi_hat", "D", "K_hat", "rho0", "rho1", "mu", "kappa_KC",
                     "q_base", "fw_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gravity[1] >= 0:
            raise ValueError("gravity must point downwards (negative y component)")
        if not 0 < self.phi_min < self.phi_max < 1:
            raise ValueError("porosity clamp bounds must satisfy 0 < min < max < 1")

    @property
    def drho(self) -> float:
        return self.rho1 - self.rho0

    def density(self, c):
        return self.rho0 + self.drho * np.asarray(c)

    def with_overrides(self, **kw) -> "HenryParameters":
        if "gravity" in kw:
            kw["gravity"] = tuple(kw["gravity"])
        return replace(self, **kw)


DEFAULT_PARAMS = HenryParameters()


@dataclass(frozen=True)
class RandomInput:
    xi1: float
    xi2: float
    xi3: float
    seed: int | None = None
    source: str = "pseudo"
    index: int | None = None
    level: int | None = None

    def __post_init__(self):
        for v in (self.xi1, self.xi2, self.xi3):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"xi components must lie in [-1, 1], got {v}")

    @property
    def xi(self) -> tuple[float, float, float]:
        return (self.xi1, self.xi2, self.xi3)

    def to_dict(self) -> dict:
        return {"xi": [float.hex(float(v)) for v in self.xi], "seed": self.seed,
                "source": self.source, "index": self.index, "level": self.level}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomInput":
        xi = [float.fromhex(v) if isinstance(v, str) else float(v) for v in d["xi"]]
        return cls(*xi, seed=d.get("seed"), source=d.get("source", "pseudo"),
                   index=d.get("index"), level=d.get("level"))

    @classmethod
    def fixed(cls, xi1=0.0, xi2=0.0, xi3=0.0) -> "RandomInput":
        return cls(float(xi1), float(xi2), float(xi3), source="fixed")


def draw_uniform(seed: int, level: int, index: int) -> RandomInput:
    """Counter-based draw of xi for sample ``index`` on ``level``.

    The Philox-4x64 bit generator is keyed by SeedSequence([seed, level, index]);
    each component is the top 53 bits of one raw 64-bit output scaled to
    [0, 1) and mapped affinely to [-1, 1).  The construction depends only on
    the raw bit stream, so it is stable across platforms and numpy versions.
    """
    key = np.random.SeedSequence([int(seed) & _SEED_MASK, int(level), int(index)])
    raw = np.random.Philox(key).random_raw(3)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    xi = 2.0 * u - 1.0
    return RandomInput(float(xi[0]), float(xi[1]), float(xi[2]), seed=int(seed),
                       source="pseudo", index=int(index), level=int(level))


def halton(index: int) -> RandomInput:
    """Point ``index`` of the unscrambled Halton sequence in bases (2, 3, 5), on [-1, 1)."""
    if index < 0:
        raise ValueError("Halton index must be non-negative")
    engine = qmc.Halton(d=3, scramble=False)
    if index:
        engine.fast_forward(index)
    u = engine.random(1)[0]
    xi = 2.0 * u - 1.0
    return RandomInput(float(xi[0]), float(xi[1]), float(xi[2]), source="halton",
                       index=int(index))


def _in_domain(x, y, tol=1e-12):
    return np.all((x >= -tol) & (x <= 2.0 + tol) & (y >= -1.0 - tol) & (y <= tol))


@dataclass
class ClampCounter:
    count: int = 0


def porosity_raw(x, y, xi: RandomInput):
    """Unclamped two-layer multiscale porosity."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x1, x2 = xi.xi1, xi.xi2
    c0 = np.where(y < -0.8, 1.2 * (1.0 + 0.2 * x1), 1.0)
    c1 = 1.0 + 0.15 * (x2 * np.cos(np.pi * x / 2) - x2 * np.sin(2 * np.pi * y)
                       + x1 * np.cos(2 * np.pi * x))
    c2 = 1.0 + 0.2 * (x1 * np.sin(64 * np.pi * x) + x2 * np.sin(32 * np.pi * y))
    return 0.35 * c0 * c1 * c2


def porosity(x, y, xi: RandomInput, params: HenryParameters = DEFAULT_PARAMS,
             counter: ClampCounter | None = None):
    """Porosity at (x, y), clamped to [phi_min, phi_max].

    Every clamped evaluation increments ``counter.count``.
    """
    if not _in_domain(np.asarray(x), np.asarray(y)):
        raise ValueError("porosity evaluated outside the domain [0, 2] x [-1, 0]")
    phi = porosity_raw(x, y, xi)
    clipped = np.clip(phi, params.phi_min, params.phi_max)
    if counter is not None:
        counter.count += int(np.count_nonzero(clipped != phi))
    return clipped if np.ndim(clipped) else float(clipped)


def permeability(phi, params: HenryParameters = DEFAULT_PARAMS):
    """Kozeny-Carman permeability kappa * phi**3 / (1 - phi**2)."""
    phi_a = np.asarray(phi, dtype=float)
    if np.any((phi_a <= 0.0) | (phi_a >= 1.0)):
        raise ValueError("permeability requires porosity strictly inside (0, 1)")
    K = params.kappa_KC * phi_a**3 / (1.0 - phi_a**2)
    return K if np.ndim(K) else float(K)


def recharge(t, xi3: float, params: HenryParameters = DEFAULT_PARAMS):
    """Outward-normal mass flux on the left boundary in kg/(m s); negative means inflow."""
    val = -params.q_base * (1.0 + 0.5 * xi3) * (1.0 + np.sin(np.pi * np.asarray(t) / 40.0))
    return val if np.ndim(val) else float(val)


@dataclass
class MaterialFields:
    """Porosity and permeability of one realization evaluated on one grid."""

    scv_porosity_volume: np.ndarray   # sum of phi * |scv| per vertex
    face_porosity: np.ndarray         # (n_elements, 4) at the face integration points
    face_permeability: np.ndarray     # (n_elements, 4)
    vertex_porosity: np.ndarray
    clamp_count: int = 0
    extra: dict = field(default_factory=dict)


# local (xi, eta) coordinates of the four sub-control-volume faces of an element
FACE_IP = np.array([[0.5, 0.25], [0.5, 0.75], [0.25, 0.5], [0.75, 0.5]])
# local coordinates of the sub-control-volume centres, one per element corner
SCV_IP = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
# corner pair (from, to) joined by each face, corners ordered (i,j),(i+1,j),(i,j+1),(i+1,j+1)
FACE_CORNERS = np.array([[0, 1], [2, 3], [0, 2], [1, 3]])


def material_fields(grid, xi: RandomInput, params: HenryParameters = DEFAULT_PARAMS,
                    face_permeability: str = "harmonic") -> MaterialFields:
    """Evaluate porosity and permeability at every quadrature point of ``grid``.

    ``face_permeability='harmonic'`` takes the harmonic mean of the Kozeny-Carman
    values at the centres of the two sub-control volumes sharing a face;
    ``'vertex'`` uses the values at the two vertices joined by the face instead;
    ``'midpoint'`` evaluates permeability at the face integration point itself.
    """
    counter = ClampCounter()
    hx, hy = grid.hx, grid.hy
    xe, ye = np.meshgrid(grid.x[:-1], grid.y[:-1])
    xe, ye = xe.ravel(), ye.ravel()

    fx = xe[:, None] + FACE_IP[None, :, 0] * hx
    fy = ye[:, None] + FACE_IP[None, :, 1] * hy
    face_phi = porosity(fx, fy, xi, params, counter)

    vx, vy = grid.vertices[:, 0], grid.vertices[:, 1]
    phi_v = porosity(vx, vy, xi, params, counter)

    # porosity at the centre of each quarter-element sub-control volume, by corner
    corners = element_corners(grid)
    phi_s = np.column_stack([porosity(xe + sx * hx, ye + sy * hy, xi, params, counter)
                             for sx, sy in SCV_IP])

    if face_permeability in ("harmonic", "vertex"):
        K = permeability(phi_s if face_permeability == "harmonic" else phi_v[corners], params)
        Ka = K[:, FACE_CORNERS[:, 0]]
        Kb = K[:, FACE_CORNERS[:, 1]]
        face_K = 2.0 * Ka * Kb / (Ka + Kb)
    elif face_permeability == "midpoint":
        face_K = permeability(face_phi, params)
    else:
        raise ValueError(f"unknown face permeability rule {face_permeability!r}")

    # storage: midpoint rule on each sub-control volume
    scv = np.zeros(grid.n_vertices)
    quarter = 0.25 * hx * hy
    for k in range(4):
        np.add.at(scv, corners[:, k], phi_s[:, k] * quarter)

    return MaterialFields(scv, np.ascontiguousarray(face_phi), np.ascontiguousarray(face_K),
                          phi_v, counter.count)


def element_corners(grid) -> np.ndarray:
    """(n_elements, 4) vertex indices of the element corners."""
    key = "corners"
    if key not in grid._cache:
        n1 = grid.nx + 1
        jj, ii = np.meshgrid(np.arange(grid.ny), np.arange(grid.nx), indexing="ij")
        v0 = (jj * n1 + ii).ravel()
        grid._cache[key] = np.column_stack([v0, v0 + 1, v0 + n1, v0 + n1 + 1]).astype(np.int64)
    return grid._cache[key]


def halton_points(n: int, start: int = 1) -> list[RandomInput]:
    return [halton(k) for k in range(start, start + n)]


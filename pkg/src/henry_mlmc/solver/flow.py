"""Implicit Euler time marching with damped Newton and MG-preconditioned BiCGStab."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from ..grids import build_grid, build_time_grid, L_MAX
from ..inputs import DEFAULT_PARAMS, HenryParameters, RandomInput, material_fields, recharge
from .assembly import Discretization, build_discretization
from .multigrid import MultigridPreconditioner

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """A realization could not be advanced; carries the diagnostic record."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SolverConfig:
    newton_abs_tol: float = 1e-8
    newton_max_iter: int = 12
    newton_damping: float = 0.5
    newton_max_halvings: int = 4
    linear_rel_tol: float = 1e-8
    linear_max_iter: int = 200
    mg_pre_smooth: int = 2
    mg_post_smooth: int = 2
    mg_cycle: str = "V"
    preconditioner: str = "multigrid"     # or "identity" for ablation runs
    # reuse the multigrid hierarchy of an earlier Jacobian while BiCGStab needs
    # at most this many iterations; 0 rebuilds it for every Newton iteration
    mg_reuse_max_iter: int = 0
    # Newton initial guess: "constant" (previous state) or "linear" extrapolation
    predictor: str = "linear"
    upwind_weight: float = 1.0
    face_permeability: str = "harmonic"
    c_bounds: tuple[float, float] = (-0.05, 1.05)
    max_steps: int | None = None

    def __post_init__(self):
        if not (self.newton_abs_tol > 0 and self.linear_rel_tol > 0):
            raise ValueError("solver tolerances must be positive")
        if not 0.0 <= self.upwind_weight <= 1.0:
            raise ValueError("upwind_weight must lie in [0, 1]")
        if self.mg_cycle != "V":
            raise ValueError("only the V-cycle is implemented")
        if self.predictor not in ("constant", "linear"):
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.preconditioner not in ("multigrid", "identity"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class State:
    c: np.ndarray
    p: np.ndarray
    t: float
    level: int

    @classmethod
    def from_vector(cls, u, t, level):
        return cls(u[0::2].copy(), u[1::2].copy(), float(t), level)

    def to_vector(self):
        u = np.empty(2 * self.c.size)
        u[0::2] = self.c
        u[1::2] = self.p
        return u


@dataclass
class StepRecord:
    step: int
    t: float
    newton_iters: int
    linear_iters: int
    residuals: list
    mass_balance: float
    substeps: int = 1


@dataclass
class RunMetrics:
    wall_time: float = 0.0
    solve_time: float = 0.0
    observer_time: float = 0.0
    total_newton_iters: int = 0
    total_linear_iters: int = 0
    clamp_count: int = 0
    retries: int = 0
    mg_builds: int = 0
    steps: list = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("wall_time", "solve_time", "observer_time",
                                              "total_newton_iters", "total_linear_iters",
                                              "clamp_count", "retries", "mg_builds")}


@dataclass
class Trajectory:
    level: int
    inputs: RandomInput
    state: State
    metrics: RunMetrics
    disc: Discretization


@dataclass
class LinearResult:
    x: np.ndarray
    iterations: int
    converged: bool


class PreconditionerCache:
    """Holds the current multigrid hierarchy between Newton iterations and steps.

    The hierarchy is rebuilt from the current Jacobian whenever the previous
    solve with it needed more than ``config.mg_reuse_max_iter`` iterations or
    failed, so reuse never trades robustness for speed.
    """

    def __init__(self, grid, config):
        self.grid = grid
        self.config = config
        self.mg = None
        self.stale = True
        self.builds = 0

    def get(self, A):
        if self.mg is None or self.stale:
            self.mg = MultigridPreconditioner.build(A, self.grid, self.config.mg_pre_smooth,
                                                    self.config.mg_post_smooth)
            self.builds += 1
            self.stale = self.config.mg_reuse_max_iter <= 0
            self.fresh = True
        else:
            self.fresh = False
        return self.mg.as_operator()

    def report(self, result):
        if not result.converged or result.iterations > self.config.mg_reuse_max_iter:
            self.stale = True


def linear_solve(A, b, config: SolverConfig = SolverConfig(), grid=None,
                 cache: PreconditionerCache | None = None) -> LinearResult:
    """BiCGStab on ``A x = b``, preconditioned by one MG V-cycle per application.

    Without a ``cache`` the hierarchy is always built from ``A``.  With one, a
    solve that fails on a reused hierarchy is repeated with a fresh one.
    """
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return LinearResult(np.zeros_like(b), 0, True)
    if config.preconditioner == "multigrid" and grid is None and cache is None:
        raise ValueError("multigrid preconditioning needs the grid of A")
    if cache is not None and config.preconditioner == "multigrid":
        res = _bicgstab(A, b, bnorm, config, cache.get(A))
        if not res.converged and not cache.fresh:
            cache.stale = True
            retry = _bicgstab(A, b, bnorm, config, cache.get(A))
            res = LinearResult(retry.x, res.iterations + retry.iterations, retry.converged)
        cache.report(res)
        return res
    M = None
    if config.preconditioner == "multigrid":
        M = MultigridPreconditioner.build(A, grid, config.mg_pre_smooth,
                                          config.mg_post_smooth).as_operator()
    return _bicgstab(A, b, bnorm, config, M)


def _bicgstab(A, b, bnorm, config, M) -> LinearResult:
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = spla.bicgstab(A, b, rtol=config.linear_rel_tol, atol=0.0,
                            maxiter=config.linear_max_iter, M=M, callback=cb)
    converged = info == 0 and np.linalg.norm(b - A @ x) <= 1.0001 * config.linear_rel_tol * bnorm
    # scipy returns before the callback when the first iterate already converges
    its = max(count[0], 1)
    return LinearResult(x, its, bool(converged and np.all(np.isfinite(x))))


def initial_vector(disc: Discretization, params: HenryParameters) -> np.ndarray:
    """c = 0 (with the boundary values), p = hydrostatic brine column."""
    grid = disc.grid
    u = np.zeros(disc.n)
    u[1::2] = params.rho1 * params.gravity[1] * grid.vertices[:, 1]
    u[disc.dirichlet] = disc.dirichlet_value[disc.dirichlet]
    return u


def _norm(R):
    return float(np.linalg.norm(R))


@dataclass
class NewtonResult:
    u: np.ndarray
    converged: bool
    iterations: int
    linear_iters: int
    residuals: list
    reason: str = ""


def newton_solve(disc, u_old, tau, t_new, xi3, config, params, u_guess=None,
                 cache: PreconditionerCache | None = None) -> NewtonResult:
    q_left = recharge(t_new, xi3, params)
    u = (u_old if u_guess is None else u_guess).copy()
    u[disc.dirichlet] = disc.dirichlet_value[disc.dirichlet]
    R = disc.residual(u, u_old, tau, q_left)
    rn = _norm(R)
    hist = [rn]
    lin_total = 0
    for it in range(config.newton_max_iter):
        if not np.isfinite(rn):
            return NewtonResult(u, False, it, lin_total, hist, "non-finite residual")
        if rn <= config.newton_abs_tol:
            return NewtonResult(u, True, it, lin_total, hist)
        R, J = disc.residual_and_jacobian(u, u_old, tau, q_left)
        lin = linear_solve(J, -R, config, disc.grid, cache)
        lin_total += lin.iterations
        if not lin.converged:
            return NewtonResult(u, False, it + 1, lin_total, hist, "linear solver did not converge")
        lam = 1.0
        for h in range(config.newton_max_halvings + 1):
            u_try = u + lam * lin.x
            R_try = disc.residual(u_try, u_old, tau, q_left)
            rn_try = _norm(R_try)
            if rn_try < rn or h == config.newton_max_halvings:
                break
            lam *= config.newton_damping
        u, R, rn = u_try, R_try, rn_try
        hist.append(rn)
    converged = rn <= config.newton_abs_tol
    return NewtonResult(u, converged, config.newton_max_iter, lin_total, hist,
                        "" if converged else "Newton did not converge")


def liquid_mass(disc: Discretization, u) -> float:
    """Liquid mass sum(phi rho |scv|) outside the Dirichlet (sea-side) control volumes."""
    free = ~disc.dirichlet[1::2]
    c = u[0::2]
    return float(np.sum(disc.phi_volume[free] * (disc.rho0 + disc.drho * c[free])))


def boundary_mass_outflow(disc: Discretization, u, q_left) -> float:
    """Net liquid mass rate leaving the free region: left recharge plus flow into the sea-side column."""
    grid = disc.grid
    F = disc.face_fluxes(u)
    last_col = np.arange(grid.ny) * grid.nx + (grid.nx - 1)
    corners = disc.corners[last_col]
    c = u[0::2]
    out = 0.0
    for f in (0, 1):
        n_ip = disc.N[f]
        cip = (c[corners] * n_ip[None, :]).sum(axis=1)
        out += np.sum((disc.rho0 + disc.drho * cip) * F[last_col, f])
    out += q_left * float(np.sum(disc.left_length))
    return float(out)


def mass_balance_residual(disc, u_new, u_old, tau, q_left) -> float:
    dm = liquid_mass(disc, u_new) - liquid_mass(disc, u_old)
    return abs(dm / tau + boundary_mass_outflow(disc, u_new, q_left))


Observer = Callable[[State], None]


def time_march(level: int, inputs: RandomInput, config: SolverConfig = SolverConfig(),
               params: HenryParameters = DEFAULT_PARAMS, observers: Sequence[Observer] = (),
               max_level: int = L_MAX, record_steps: bool = True) -> Trajectory:
    """Advance one realization over the level's time grid starting from c = 0.

    Observers are called with the :class:`State` after every accepted step.
    Raises :class:`SolverFailure` if a step fails even after one retry with
    two half steps, or if c leaves ``config.c_bounds``.
    """
    t0 = time.perf_counter()
    grid = build_grid(level, max_level)
    tgrid = build_time_grid(level, max_level)
    material = material_fields(grid, inputs, params, config.face_permeability)
    disc = build_discretization(grid, material, params, config.upwind_weight)
    metrics = RunMetrics(clamp_count=material.clamp_count)
    u = initial_vector(disc, params)
    cache = PreconditionerCache(grid, config)
    n_steps = tgrid.r if config.max_steps is None else min(tgrid.r, config.max_steps)
    lo, hi = config.c_bounds

    u_prev = None
    for k in range(1, n_steps + 1):
        t_new = k * tgrid.tau
        ts = time.perf_counter()
        guess = None
        if config.predictor == "linear" and u_prev is not None:
            guess = 2.0 * u - u_prev
        res = newton_solve(disc, u, tgrid.tau, t_new, inputs.xi3, config, params, guess, cache)
        if not res.converged and guess is not None:
            res = newton_solve(disc, u, tgrid.tau, t_new, inputs.xi3, config, params,
                               cache=cache)
        substeps = 1
        if not res.converged:
            log.info("level %d step %d failed (%s); retrying with two half steps",
                     level, k, res.reason)
            metrics.retries += 1
            half = 0.5 * tgrid.tau
            cache.stale = True
            r1 = newton_solve(disc, u, half, t_new - half, inputs.xi3, config, params,
                              cache=cache)
            r2 = (newton_solve(disc, r1.u, half, t_new, inputs.xi3, config, params, cache=cache)
                  if r1.converged else r1)
            if not (r1.converged and r2.converged):
                raise SolverFailure(f"step {k} at t={t_new} failed: {r2.reason}",
                                    {"level": level, "step": k, "t": t_new,
                                     "residuals": r2.residuals, "xi": inputs.xi})
            res = NewtonResult(r2.u, True, r1.iterations + r2.iterations,
                               r1.linear_iters + r2.linear_iters,
                               r1.residuals + r2.residuals)
            substeps = 2
        u_new = res.u
        metrics.total_newton_iters += res.iterations
        metrics.total_linear_iters += res.linear_iters
        if record_steps:
            q_left = recharge(t_new, inputs.xi3, params)
            balance = (mass_balance_residual(disc, u_new, u, tgrid.tau, q_left)
                       if substeps == 1 else float("nan"))
            metrics.steps.append(StepRecord(k, t_new, res.iterations, res.linear_iters,
                                            res.residuals, balance, substeps))
        u_prev, u = u, u_new
        metrics.solve_time += time.perf_counter() - ts

        c = u[0::2]
        if not np.all(np.isfinite(u)):
            raise SolverFailure(f"non-finite state at step {k}", {"level": level, "step": k})
        if c.min() < lo or c.max() > hi:
            raise SolverFailure(f"mass fraction left [{lo}, {hi}] at step {k}: "
                                f"[{c.min():.4f}, {c.max():.4f}]", {"level": level, "step": k})
        if observers:
            to = time.perf_counter()
            state = State.from_vector(u, t_new, level)
            for obs in observers:
                obs(state)
            metrics.observer_time += time.perf_counter() - to

    metrics.mg_builds = cache.builds
    metrics.wall_time = time.perf_counter() - t0
    return Trajectory(level, inputs, State.from_vector(u, n_steps * tgrid.tau, level), metrics, disc)


def darcy_velocity(state: State, disc: Discretization) -> np.ndarray:
    """Darcy velocity (m/s) per element, from the same face fluxes the scheme uses.

    Returns an ``(n_elements, 2)`` array; see :func:`vertex_velocity` for a
    vertex field suitable for plotting.
    """
    F = disc.face_fluxes(state.to_vector())
    qx = 0.5 * (F[:, 0] + F[:, 1]) / disc.L[0]
    qy = 0.5 * (F[:, 2] + F[:, 3]) / disc.L[2]
    return np.column_stack([qx, qy])


def vertex_velocity(state: State, disc: Discretization) -> np.ndarray:
    q_e = darcy_velocity(state, disc)
    nv = disc.grid.n_vertices
    acc = np.zeros((nv, 2))
    cnt = np.zeros(nv)
    for k in range(4):
        np.add.at(acc, disc.corners[:, k], q_e)
        np.add.at(cnt, disc.corners[:, k], 1.0)
    return acc / cnt[:, None]

"""Independent oracles shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np

from henry_mlmc.grids import build_grid
from henry_mlmc.inputs import DEFAULT_PARAMS, RandomInput, material_fields, recharge
from henry_mlmc.mlmc import allocate_samples
from henry_mlmc.solver.assembly import build_discretization
from henry_mlmc.solver.flow import initial_vector


def random_state(d, rng, p_noise=200.0):
    """Admissible state: c in [0, 1], pressure near hydrostatic, Dirichlet values set."""
    u = initial_vector(d, DEFAULT_PARAMS)
    nv = d.grid.n_vertices
    u[0::2] = rng.random(nv)
    u[1::2] += p_noise * rng.standard_normal(nv)
    u[d.dirichlet] = d.dirichlet_value[d.dirichlet]
    return u


def jvp_error(d, rng, h=1e-7):
    """Relative error of J v against a central difference along a random v."""
    u = random_state(d, rng)
    u_old = random_state(d, rng)
    q = recharge(64.0 * rng.integers(1, 95), 0.3)
    nv = d.grid.n_vertices
    v = np.empty(d.n)
    v[0::2] = rng.standard_normal(nv)
    v[1::2] = 100.0 * rng.standard_normal(nv)   # pressures vary on the Pa scale
    _, J = d.residual_and_jacobian(u, u_old, 64.0, q)
    fd = (d.residual(u + h * v, u_old, 64.0, q) - d.residual(u - h * v, u_old, 64.0, q)) / (2 * h)
    jv = J @ v
    return np.linalg.norm(jv - fd) / np.linalg.norm(jv)


def first_newton_system(level):
    g = build_grid(level)
    d = build_discretization(g, material_fields(g, RandomInput.fixed()), DEFAULT_PARAMS)
    u0 = initial_vector(d, DEFAULT_PARAMS)
    tau = 6016.0 / (94 * 4**level)
    R, J = d.residual_and_jacobian(u0, u0, tau, recharge(tau, 0.0))
    return g, J, -R


def exhaustive_optimum(V, s, target, bound):
    """Cheapest integer m >= 1 with sum V/m <= target, by enumeration.

    All levels but the first are enumerated up to ``bound``; for fixed values
    of those the cheapest feasible m_0 is the smallest one that fits.
    """
    best = math.inf
    for rest in itertools.product(*(range(1, b + 1) for b in bound[1:])):
        slack = target - sum(v / m for v, m in zip(V[1:], rest))
        if slack <= 0:
            continue
        m0 = max(1, math.ceil(V[0] / slack - 1e-12))
        while V[0] / m0 > slack:
            m0 += 1
        best = min(best, m0 * s[0] + sum(m * c for m, c in zip(rest, s[1:])))
    return best


def synthetic_instances(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        s = np.sort(rng.uniform(1.0, 60.0, k))
        V = np.sort(rng.uniform(0.1, 10.0, k))[::-1]
        # tolerance chosen so the continuous optimum is 10..40 samples per level
        unit = np.sqrt(V / s) * np.sum(np.sqrt(V * s))
        eps = math.sqrt(2.0 * unit.min() / rng.uniform(10.0, 20.0))
        if 2.0 / eps**2 * unit.max() <= 40.0:
            out.append((V, s, eps))
    return out


def allocation_optimality_report(n=50):
    """(worst cost ratio, every constraint met) over ``n`` synthetic instances."""
    worst, feasible = 0.0, True
    for V, s, eps in synthetic_instances(n):
        a = allocate_samples(eps, V, s)
        feasible &= a.variance <= a.target * (1 + 1e-12)
        bound = [int(a.S_rounded // c) for c in s]
        opt = exhaustive_optimum(V, s, a.target, bound)
        worst = max(worst, a.S_rounded / opt)
    return worst, feasible

"""Vertex-centred finite-volume (box method) discretization of the coupled
continuity / salt-transport system on a structured quadrilateral grid.

Unknowns are interleaved per vertex: ``u[2 v] = c_v`` and ``u[2 v + 1] = p_v``.
Row ``2 v`` holds the salt balance of the control volume of ``v`` and row
``2 v + 1`` the liquid mass balance, both in kg/s per unit depth.

Each element contributes four sub-control-volume faces.  Gradients at the
face integration points come from the bilinear shape functions, so the
stencil is the 9-point vertex neighbourhood for every field block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp

from ..inputs import FACE_IP, element_corners

# corner offsets (di, dj) of the element corners
_CORNER_OFF = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])


def _face_tables(grid, gravity_y):
    hx, hy = grid.hx, grid.hy
    N = np.empty((4, 4))
    G = np.empty((4, 4))
    L = np.empty(4)
    GN = np.empty(4)
    for f, (s, t) in enumerate(FACE_IP):
        N[f] = [(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t]
        if f < 2:  # normal +x
            G[f] = np.array([-(1 - t), (1 - t), -t, t]) / hx
            L[f] = 0.5 * hy
            GN[f] = 0.0
        else:      # normal +y
            G[f] = np.array([-(1 - s), -s, (1 - s), s]) / hy
            L[f] = 0.5 * hx
            GN[f] = gravity_y
    return N, G, L, GN


def _neighbour_table():
    nbt = np.empty((4, 4), dtype=np.int64)
    for a in range(4):
        for k in range(4):
            di = _CORNER_OFF[k, 0] - _CORNER_OFF[a, 0]
            dj = _CORNER_OFF[k, 1] - _CORNER_OFF[a, 1]
            nbt[a, k] = (dj + 1) * 3 + (di + 1)
    return nbt


def jacobian_pattern(grid):
    """CSR pattern of the interleaved 9-point block stencil.

    Returns ``(indptr, indices, slot)`` where ``slot[v, n]`` is the rank of
    neighbour ``n`` (``n = (dj + 1) * 3 + di + 1``) among the sorted
    neighbours of ``v``, or -1 if it lies outside the grid.
    """
    key = "jac_pattern"
    if key in grid._cache:
        return grid._cache[key]
    nx1, ny1 = grid.nx + 1, grid.ny + 1
    nv = grid.n_vertices
    ii = np.tile(np.arange(nx1), ny1)
    jj = np.repeat(np.arange(ny1), nx1)
    slot = np.full((nv, 9), -1, dtype=np.int64)
    count = np.zeros(nv, dtype=np.int64)
    cols_per_v = []
    for n in range(9):
        dj, di = divmod(n, 3)
        dj -= 1
        di -= 1
        ok = (ii + di >= 0) & (ii + di < nx1) & (jj + dj >= 0) & (jj + dj < ny1)
        slot[ok, n] = count[ok]
        count[ok] += 1
        cols_per_v.append(np.where(ok, np.arange(nv) + dj * nx1 + di, -1))
    nbrs = np.stack(cols_per_v, axis=1)              # (nv, 9), sorted by n
    row_len = 2 * count
    indptr = np.zeros(2 * nv + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.repeat(row_len, 2))
    indices = np.empty(indptr[-1], dtype=np.int64)
    for v in range(nv):
        nb_v = nbrs[v][nbrs[v] >= 0]
        cols = np.empty(2 * nb_v.size, dtype=np.int64)
        cols[0::2] = 2 * nb_v
        cols[1::2] = 2 * nb_v + 1
        indices[indptr[2 * v]:indptr[2 * v + 1]] = cols
        indices[indptr[2 * v + 1]:indptr[2 * v + 2]] = cols
    grid._cache[key] = (indptr, indices, slot)
    return grid._cache[key]


@dataclass
class Discretization:
    """Everything the kernel needs for one (grid, realization) pair."""

    grid: object
    corners: np.ndarray
    face_phi: np.ndarray
    face_K: np.ndarray
    phi_volume: np.ndarray
    left_length: np.ndarray
    dirichlet: np.ndarray        # bool mask over the 2 * nv unknowns
    dirichlet_value: np.ndarray
    dirichlet_scale: np.ndarray
    N: np.ndarray
    G: np.ndarray
    L: np.ndarray
    GN: np.ndarray
    NB: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    slot: np.ndarray
    rho0: float
    drho: float
    mu: float
    D: float
    upwind: float

    @property
    def n(self) -> int:
        return 2 * self.grid.n_vertices

    def residual(self, u, u_old, tau, q_left):
        R = np.zeros(self.n)
        _assemble(u, u_old, tau, q_left, self.corners, self.face_phi, self.face_K,
                  self.phi_volume, self.left_length, self.dirichlet, self.dirichlet_value,
                  self.dirichlet_scale, self.N, self.G, self.L, self.GN, self.NB,
                  self.indptr, self.slot, self.rho0, self.drho, self.mu, self.D,
                  self.upwind, R, np.empty(0), False)
        return R

    def residual_and_jacobian(self, u, u_old, tau, q_left):
        R = np.zeros(self.n)
        data = np.zeros(self.indices.size)
        _assemble(u, u_old, tau, q_left, self.corners, self.face_phi, self.face_K,
                  self.phi_volume, self.left_length, self.dirichlet, self.dirichlet_value,
                  self.dirichlet_scale, self.N, self.G, self.L, self.GN, self.NB,
                  self.indptr, self.slot, self.rho0, self.drho, self.mu, self.D,
                  self.upwind, R, data, True)
        J = sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))
        return R, J

    def face_fluxes(self, u):
        """Volumetric Darcy flux (m^2/s per unit depth) through every sub-control-volume face."""
        F = np.empty(self.face_K.shape)
        _face_flux(u, self.corners, self.face_K, self.G, self.N, self.L, self.GN,
                   self.rho0, self.drho, self.mu, F)
        return F


def build_discretization(grid, material, params, upwind_weight=1.0) -> Discretization:
    nv = grid.n_vertices
    indptr, indices, slot = jacobian_pattern(grid)
    N, G, L, GN = _face_tables(grid, params.gravity[1])
    left = grid.boundary["left"]
    right = grid.boundary["right"]
    _, wy = grid.cv_widths
    left_length = np.zeros(nv)
    left_length[left] = wy

    dirichlet = np.zeros(2 * nv, dtype=bool)
    value = np.zeros(2 * nv)
    dirichlet[2 * right] = True
    value[2 * right] = 1.0
    dirichlet[2 * right + 1] = True
    value[2 * right + 1] = params.rho1 * params.gravity[1] * grid.y
    dirichlet[2 * left] = True
    value[2 * left] = 0.0

    # Dirichlet rows are scaled like a typical diagonal entry of their field
    scale = np.zeros(2 * nv)
    scale[0::2] = params.rho0 * params.phi_hat * grid.hx * grid.hy
    scale[1::2] = params.rho0 * params.K_hat / params.mu
    return Discretization(grid, element_corners(grid), material.face_porosity,
                          material.face_permeability, material.scv_porosity_volume,
                          left_length, dirichlet, value, scale, N, G, L, GN,
                          _neighbour_table(), indptr, indices, slot, params.rho0,
                          params.drho, params.mu, params.D, float(upwind_weight))


@nb.njit(cache=True)
def _face_flux(u, corners, face_K, G, N, L, GN, rho0, drho, mu, F):
    ne = corners.shape[0]
    for e in range(ne):
        for f in range(4):
            cip = 0.0
            dpn = 0.0
            for k in range(4):
                v = corners[e, k]
                cip += N[f, k] * u[2 * v]
                dpn += G[f, k] * u[2 * v + 1]
            rho_ip = rho0 + drho * cip
            F[e, f] = -(face_K[e, f] / mu) * (dpn - rho_ip * GN[f]) * L[f]


@nb.njit(cache=True)
def _assemble(u, u_old, tau, q_left, corners, face_phi, face_K, phi_volume, left_length,
              dirichlet, dvalue, dscale, N, G, L, GN, NB, indptr, slot, rho0, drho, mu, D,
              w, R, data, want_jac):
    ne = corners.shape[0]
    nv = phi_volume.shape[0]
    dF_dp = np.empty(4)
    dF_dc = np.empty(4)
    dM_dc = np.empty(4)
    dM_dp = np.empty(4)
    dT_dc = np.empty(4)
    dT_dp = np.empty(4)
    vk = np.empty(4, dtype=np.int64)
    fc0 = (0, 2, 0, 1)
    fc1 = (1, 3, 2, 3)

    for e in range(ne):
        for k in range(4):
            vk[k] = corners[e, k]
        for f in range(4):
            a = fc0[f]
            b = fc1[f]
            va = vk[a]
            vb = vk[b]
            cip = 0.0
            dcn = 0.0
            dpn = 0.0
            for k in range(4):
                ck = u[2 * vk[k]]
                cip += N[f, k] * ck
                dcn += G[f, k] * ck
                dpn += G[f, k] * u[2 * vk[k] + 1]
            rho_ip = rho0 + drho * cip
            kmu = face_K[e, f] / mu
            Lf = L[f]
            F = -kmu * (dpn - rho_ip * GN[f]) * Lf
            M = rho_ip * F
            up = a if F >= 0.0 else b
            cu = u[2 * vk[up]]
            rc_face = w * (rho0 + drho * cu) * cu + (1.0 - w) * rho_ip * cip
            dcoef = face_phi[e, f] * D * Lf
            T = rc_face * F - rho_ip * dcoef * dcn

            ra_c = 2 * va
            rb_c = 2 * vb
            da_c = dirichlet[ra_c]
            db_c = dirichlet[rb_c]
            da_p = dirichlet[ra_c + 1]
            db_p = dirichlet[rb_c + 1]
            if not da_c:
                R[ra_c] += T
            if not db_c:
                R[rb_c] -= T
            if not da_p:
                R[ra_c + 1] += M
            if not db_p:
                R[rb_c + 1] -= M

            if want_jac:
                for k in range(4):
                    dF_dp[k] = -kmu * G[f, k] * Lf
                    dF_dc[k] = kmu * drho * N[f, k] * GN[f] * Lf
                    dM_dp[k] = rho_ip * dF_dp[k]
                    dM_dc[k] = drho * N[f, k] * F + rho_ip * dF_dc[k]
                    drc = (1.0 - w) * (drho * N[f, k] * cip + rho_ip * N[f, k])
                    if k == up:
                        drc += w * (rho0 + 2.0 * drho * cu)
                    dT_dc[k] = (drc * F + rc_face * dF_dc[k]
                                - dcoef * (drho * N[f, k] * dcn + rho_ip * G[f, k]))
                    dT_dp[k] = rc_face * dF_dp[k]
                for k in range(4):
                    if not da_c:
                        pos = indptr[ra_c] + 2 * slot[va, NB[a, k]]
                        data[pos] += dT_dc[k]
                        data[pos + 1] += dT_dp[k]
                    if not da_p:
                        pos = indptr[ra_c + 1] + 2 * slot[va, NB[a, k]]
                        data[pos] += dM_dc[k]
                        data[pos + 1] += dM_dp[k]
                    if not db_c:
                        pos = indptr[rb_c] + 2 * slot[vb, NB[b, k]]
                        data[pos] -= dT_dc[k]
                        data[pos + 1] -= dT_dp[k]
                    if not db_p:
                        pos = indptr[rb_c + 1] + 2 * slot[vb, NB[b, k]]
                        data[pos] -= dM_dc[k]
                        data[pos + 1] -= dM_dp[k]

    for v in range(nv):
        rc = 2 * v
        rp = rc + 1
        c = u[rc]
        c0 = u_old[rc]
        pv = phi_volume[v]
        if not dirichlet[rc]:
            R[rc] += pv * ((rho0 + drho * c) * c - (rho0 + drho * c0) * c0) / tau
            if want_jac:
                data[indptr[rc] + 2 * slot[v, 4]] += pv * (rho0 + 2.0 * drho * c) / tau
        if not dirichlet[rp]:
            R[rp] += pv * drho * (c - c0) / tau + q_left * left_length[v]
            if want_jac:
                data[indptr[rp] + 2 * slot[v, 4]] += pv * drho / tau
        for r in (rc, rp):
            if dirichlet[r]:
                R[r] = dscale[r] * (u[r] - dvalue[r])
                if want_jac:
                    data[indptr[r] + 2 * slot[v, 4] + (r - rc)] = dscale[r]

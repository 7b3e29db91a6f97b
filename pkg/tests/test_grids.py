import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from henry_mlmc.grids import (
    GridError, build_grid, build_time_grid, inject, interpolation_matrix, multigrid_hierarchy,
    prolong, restrict, restriction_matrix,
)


@pytest.mark.parametrize("level,nx,ny,nv", [(0, 16, 8, 153), (1, 64, 32, 2145),
                                            (2, 256, 128, 33153), (3, 1024, 512, 525825)])
def test_grid_sizes(level, nx, ny, nv):
    g = build_grid(level)
    assert (g.nx, g.ny, g.n_vertices) == (nx, ny, nv)
    assert g.n_elements == nx * ny


def test_level_above_maximum_rejected():
    with pytest.raises(GridError, match="exceeds"):
        build_grid(3, max_level=2)
    with pytest.raises(GridError):
        build_grid(-1)


@pytest.mark.parametrize("level", [0, 1, 2])
def test_control_volumes_tile_domain(level):
    g = build_grid(level)
    assert g.cv_areas.sum() == pytest.approx(2.0, rel=1e-14)
    assert np.all(g.cv_areas > 0)


def test_control_volume_faces():
    g = build_grid(0)
    corner = g.control_volume(0)
    assert corner.area == pytest.approx(0.25 * g.hx * g.hy)
    assert len(corner.faces) == 2
    inner = g.control_volume(g.nx + 2)
    assert inner.area == pytest.approx(g.hx * g.hy)
    assert len(inner.faces) == 4


def test_nesting_of_coordinates():
    g0, g1 = build_grid(0), build_grid(1)
    fine = {tuple(np.round(v, 12)) for v in g1.vertices}
    assert all(tuple(np.round(v, 12)) in fine for v in g0.vertices)


def test_boundary_sets():
    g = build_grid(0)
    b = g.boundary
    assert np.allclose(g.vertices[b["left"], 0], 0.0)
    assert np.allclose(g.vertices[b["right"], 0], 2.0)
    assert np.allclose(g.vertices[b["bottom"], 1], -1.0)
    assert np.allclose(g.vertices[b["top"], 1], 0.0)


def test_locate_nearest_vertex():
    g = build_grid(0)
    v = g.locate(1.01, -0.49)
    assert np.allclose(g.vertices[v], [1.0, -0.5])


@pytest.mark.parametrize("level,r,tau", [(0, 94, 64.0), (1, 376, 16.0), (2, 1504, 4.0)])
def test_time_grid(level, r, tau):
    tg = build_time_grid(level)
    assert (tg.r, tg.tau) == (r, tau)
    assert tg.times[-1] == 6016.0


def test_time_grids_nested():
    t0 = set(build_time_grid(0).times)
    t1 = set(build_time_grid(1).times)
    assert t0 <= t1


def test_grid_metadata_json():
    d = json.loads(build_grid(1).to_json())
    assert d["nx"] == 64 and d["n_vertices"] == 2145


def test_multigrid_hierarchy_bisections():
    grids = multigrid_hierarchy(build_grid(2))
    assert [(g.nx, g.ny) for g in grids] == [(256, 128), (128, 64), (64, 32), (32, 16), (16, 8)]
    assert grids[2].level == 1 and grids[1].level is None


def test_prolong_constant_and_linear():
    g0, g1 = build_grid(0), build_grid(1)
    assert np.allclose(prolong(np.ones(g0.n_vertices), 0), 1.0)
    f = lambda v: v[:, 0] + 2.0 * v[:, 1]  # noqa: E731
    assert np.allclose(prolong(f(g0.vertices), 0), f(g1.vertices), atol=1e-13)


def test_prolong_midpoints_average_neighbours():
    rng = np.random.default_rng(0)
    g0, g1 = build_grid(0), build_grid(1)
    u = rng.normal(size=g0.n_vertices)
    uf = prolong(u, 0).reshape(g1.shape)
    uc = u.reshape(g0.shape)
    # fine vertex 2 of 4 between coarse vertices i and i+1 along a coarse grid line
    assert np.allclose(uf[::4, 2::4], 0.5 * (uc[:, :-1] + uc[:, 1:]))
    assert np.allclose(uf[2::4, ::4], 0.5 * (uc[:-1, :] + uc[1:, :]))


def test_prolong_size_mismatch():
    with pytest.raises(GridError):
        prolong(np.ones(10), 0)


def test_restrict_constant():
    assert np.allclose(restrict(np.ones(build_grid(1).n_vertices), 1), 1.0)


def test_restrict_delta_centre_weight_largest():
    g0, g1 = build_grid(0), build_grid(1)
    # interior coarse vertex (i, j) = (8, 4) coincides with fine vertex (32, 16)
    e = np.zeros(g1.n_vertices)
    e[16 * (g1.nx + 1) + 32] = 1.0
    R = restriction_matrix(g0, g1)
    row = R[4 * (g0.nx + 1) + 8].toarray().ravel()
    col = R[:, 16 * (g1.nx + 1) + 32].toarray().ravel()
    assert row.max() == row.reshape(g1.shape)[16, 32]
    assert np.argmax(col) == 4 * (g0.nx + 1) + 8
    assert restrict(e, 1).sum() > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_restrict_is_weighted_adjoint_of_prolong(seed):
    rng = np.random.default_rng(seed)
    g0, g1 = build_grid(0), build_grid(1)
    u = rng.normal(size=g1.n_vertices)
    v = rng.normal(size=g0.n_vertices)
    # brute-force inner products, sigma = 1
    lhs = sum(a * b * w for a, b, w in zip(restrict(u, 1), v, g0.cv_areas))
    rhs = sum(a * b * w for a, b, w in zip(u, prolong(v, 0), g1.cv_areas))
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-13)


def test_interpolation_requires_nesting():
    with pytest.raises(GridError):
        interpolation_matrix(build_grid(1), build_grid(0))


def test_inject_picks_shared_vertices():
    g0, g1 = build_grid(0), build_grid(1)
    f = lambda v: np.sin(v[:, 0]) * v[:, 1]  # noqa: E731
    assert np.array_equal(inject(f(g1.vertices), g1, g0), f(g0.vertices))

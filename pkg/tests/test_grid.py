import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscinv.grid import (
    CORNER_OFFSETS,
    GridError,
    SignedDistanceGrid,
    box_sdf,
    build_simulation_grid,
    cell_boundary_weights,
    cell_volume_weights,
    make_sdf,
    read_sdf,
    sample_sdf,
    sphere_sdf,
    trilinear_weight_gradients,
    trilinear_weights,
    write_sdf,
)

unit = st.floats(0.0, 1.0, allow_nan=False)
xis = st.tuples(unit, unit, unit).map(np.array)


@given(xis)
def test_partition_of_unity(xi):
    w = trilinear_weights(xi)
    assert np.all(w >= -1e-15)
    assert np.isclose(w.sum(), 1.0)


@given(xis, st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_trilinear_reproduces_affine(xi, coef):
    a = np.array(coef[:3])
    vals = CORNER_OFFSETS @ a + coef[3]
    assert np.isclose(trilinear_weights(xi) @ vals, xi @ a + coef[3], atol=1e-12)


@given(xis)
def test_weight_gradients_match_differences(xi):
    eps = 1e-6
    g = trilinear_weight_gradients(xi)
    for d in range(3):
        e = np.zeros(3)
        e[d] = eps
        fd = (trilinear_weights(xi + e) - trilinear_weights(xi - e)) / (2 * eps)
        assert np.allclose(g[:, d], fd, atol=1e-8)


def test_full_cell_volume_weights():
    w = cell_volume_weights(-np.ones(8), 2.0)
    assert np.allclose(w, 1.0)  # h^3 / 8


def test_empty_cell_volume_weights():
    assert np.allclose(cell_volume_weights(np.ones(8), 1.0), 0.0)


@pytest.mark.parametrize("c", [0.25, 0.375, 0.5, 0.8125])
def test_planar_cut_volume_weights(c):
    # phi = z - c; fill z < c. Integrals: bottom corners (c - c^2/2)/4, top corners c^2/8
    h = 1.5
    phi = (CORNER_OFFSETS[:, 2] - c) * h
    w = cell_volume_weights(phi, h)
    bottom = CORNER_OFFSETS[:, 2] == 0
    assert np.allclose(w[bottom], (c - c * c / 2) / 4 * h ** 3)
    assert np.allclose(w[~bottom], c * c / 8 * h ** 3)


@pytest.mark.parametrize("c", [0.3, 0.5, 0.7])
def test_planar_cut_boundary_weights(c):
    h = 2.0
    phi = (CORNER_OFFSETS[:, 2] - c) * h
    w, n = cell_boundary_weights(phi, h)
    bottom = CORNER_OFFSETS[:, 2] == 0
    assert np.allclose(w[bottom], (1 - c) / 4 * h ** 2)
    assert np.allclose(w[~bottom], c / 4 * h ** 2)
    assert np.allclose(n, [0, 0, 1])


def test_sphere_volume_close_to_analytic():
    # the trilinear SDF shaves convex surfaces; at 12 voxels across the loss is below 2%
    errs = []
    for r in (3.0, 6.0):
        grid = build_simulation_grid(sphere_sdf(r))
        errs.append(abs(grid.volume() - 4 / 3 * np.pi * r ** 3) / (4 / 3 * np.pi * r ** 3))
    assert errs[1] < 0.02
    assert errs[1] < errs[0] / 3


def test_node_volumes_sum_to_volume(ball_grid):
    assert np.isclose(ball_grid.node_volumes().sum(), ball_grid.volume(), rtol=1e-4)
    assert np.all(ball_grid.node_volumes() > 0)


def test_boundary_normals_point_outward(ball_grid):
    pos, _ = ball_grid.surface_sites()
    c = ball_grid.rest_positions.mean(axis=0)
    radial = (pos - c) / np.linalg.norm(pos - c, axis=1, keepdims=True)
    assert np.all(np.sum(radial * ball_grid.normals, axis=1) > 0.7)


def test_surface_sites_on_zero_set(ball_grid):
    pos, _ = ball_grid.surface_sites()
    assert np.max(np.abs(sample_sdf(ball_grid.sdf, pos))) < 1e-9


def test_box_faces_have_boundary_cells():
    grid = build_simulation_grid(box_sdf([4, 3, 2]))
    assert len(grid.boundary_cells) > 0
    assert np.isclose(grid.normals[:, 2].max(), 1.0, atol=1e-6)


def test_sample_at_nodes_returns_values():
    sdf = sphere_sdf(3.0)
    pts = sdf.node_positions()[::37]
    assert np.allclose(sample_sdf(sdf, pts), sdf.values.reshape(-1)[::37])


def test_sample_outside_lattice_raises():
    with pytest.raises(GridError):
        sample_sdf(sphere_sdf(2.0), [-5.0, 0.0, 0.0])


def test_empty_object_raises():
    with pytest.raises(GridError):
        build_simulation_grid(SignedDistanceGrid(np.ones((4, 4, 4))))


def test_unknown_generator():
    with pytest.raises(GridError):
        make_sdf("teapot")


def test_sdf_file_round_trip(tmp_path):
    sdf = SignedDistanceGrid(np.random.default_rng(0).normal(size=(4, 5, 6)), 0.7, np.array([1.0, -2.0, 0.5]))
    write_sdf(tmp_path / "a.grid", sdf)
    back = read_sdf(tmp_path / "a.grid")
    assert np.array_equal(back.values, sdf.values)
    assert back.h == sdf.h and np.array_equal(back.origin, sdf.origin)


def test_truncated_grid_file(tmp_path):
    p = tmp_path / "b.grid"
    write_sdf(p, sphere_sdf(1.0, padding=1))
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(GridError):
        read_sdf(p)


def test_dirichlet_region(bar_grid):
    pos, _ = bar_grid.surface_sites()
    assert np.array_equal(bar_grid.dirichlet, pos[:, 0] <= 4.0)
    assert 0 < bar_grid.dirichlet.sum() < len(bar_grid.dirichlet)


@settings(max_examples=25, deadline=None)
@given(st.floats(1.5, 4.0), st.floats(0.6, 1.4))
def test_cell_classification(r, h):
    grid = build_simulation_grid(sphere_sdf(r, h=h))
    phi = grid.sdf.corner_values(grid.cells)
    assert np.all(np.any(phi < 0, axis=1))
    assert np.all(np.any(phi[grid.boundary_cells] > 0, axis=1))
    assert np.all(grid.w_v >= 0) and np.all(grid.w_v <= h ** 3 / 8 + 1e-12)

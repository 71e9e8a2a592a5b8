import numpy as np
import pytest

from msfem.mesh import (build_uniform_periodic_mesh, edge_triangle_counts,
                        mesh_level_to_resolution)


@pytest.mark.parametrize("n,nv,ne,nt", [(2, 4, 12, 8), (4, 16, 48, 32)])
def test_entity_counts(n, nv, ne, nt):
    mesh = build_uniform_periodic_mesh(n)
    assert mesh.num_vertices == nv
    assert mesh.num_edges == ne
    assert mesh.num_triangles == nt


@pytest.mark.parametrize("n", [2, 4, 6, 8])
def test_total_area_is_one(n):
    mesh = build_uniform_periodic_mesh(n)
    assert abs(mesh.areas.sum() - 1.0) <= 1e-13


@pytest.mark.parametrize("n", [2, 4, 8])
def test_all_areas_positive_and_equal(n):
    mesh = build_uniform_periodic_mesh(n)
    assert np.all(mesh.areas > 0)
    assert mesh.areas == pytest.approx(np.full(2 * n * n, 1.0 / (2 * n * n)))


@pytest.mark.parametrize("n", [2, 4, 6])
def test_each_edge_shared_by_two_triangles(n):
    mesh = build_uniform_periodic_mesh(n)
    assert np.all(edge_triangle_counts(mesh) == 2)


def test_unwrapped_coords_are_integer_shifts():
    mesh = build_uniform_periodic_mesh(4)
    rep = mesh.vertices[mesh.triangles]          # (nt, 3, 2)
    shift = mesh.tri_coords - rep
    assert shift == pytest.approx(np.round(shift), abs=1e-14)


def test_vertices_in_unit_cell():
    mesh = build_uniform_periodic_mesh(6)
    assert np.all(mesh.vertices >= 0.0) and np.all(mesh.vertices < 1.0)
    assert np.all(mesh.edge_midpoints >= 0.0) and np.all(mesh.edge_midpoints < 1.0)


def test_rejects_small_or_odd_resolution():
    with pytest.raises(ValueError):
        build_uniform_periodic_mesh(1)
    with pytest.raises(ValueError):
        build_uniform_periodic_mesh(5)


def test_level_ladder():
    assert mesh_level_to_resolution(1) == 4
    assert mesh_level_to_resolution(5) == 64
    with pytest.raises(ValueError):
        mesh_level_to_resolution(0)


def test_grid_spacing():
    mesh = build_uniform_periodic_mesh(8)
    assert mesh.h == pytest.approx(0.125)

import numpy as np
import pytest

from meshsplat.errors import MeshError
from meshsplat.mesh import (
    Mesh,
    compute_vertex_normals,
    edge_length_loss,
    laplacian_loss,
    normal_consistency_loss,
    umbrella_operator,
)


def test_mesh_builds_adjacency(ico):
    assert ico.n_vertices == 12
    assert ico.n_faces == 20
    assert len(ico.edges) == 30
    assert all(len(n) == 5 for n in ico.vertex_neighbors)


def test_mesh_rejects_bad_faces():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 1]])


def test_mesh_arrays_are_read_only(ico):
    with pytest.raises(ValueError):
        ico.vertices[0, 0] = 1.0


def test_boundary_vertices(grid, cube):
    assert len(grid.boundary_vertices) == 16
    assert len(cube.boundary_vertices) == 0


def test_umbrella_is_zero_on_flat_interior(grid):
    delta = grid.umbrella @ grid.vertices
    interior = np.setdiff1d(np.arange(grid.n_vertices), grid.boundary_vertices)
    assert np.allclose(delta[interior], 0.0, atol=1e-12)


def test_umbrella_rejects_isolated_vertex():
    mesh = Mesh(np.eye(4, 3), [[0, 1, 2]])
    with pytest.raises(MeshError):
        umbrella_operator(mesh.vertex_neighbors)
    op = umbrella_operator(mesh.vertex_neighbors, fixed=np.array([3]))
    assert op[3].nnz == 0


def test_drop_isolated_vertices_keeps_colors():
    mesh = Mesh(np.eye(4, 3), [[0, 2, 3]], np.arange(12).reshape(4, 3) / 12.0)
    trimmed = mesh.drop_isolated_vertices()
    assert trimmed.n_vertices == 3
    assert np.array_equal(trimmed.vertex_colors, mesh.vertex_colors[[0, 2, 3]])
    assert np.array_equal(trimmed.faces, [[0, 1, 2]])


def test_icosahedron_normals_point_outward(ico):
    normals = compute_vertex_normals(ico)
    radial = ico.vertices / np.linalg.norm(ico.vertices, axis=1, keepdims=True)
    assert np.allclose(np.sum(normals * radial, axis=1), 1.0, atol=1e-9)


def test_laplacian_loss_gradient_matches_difference(grid, rng):
    positions = grid.vertices + rng.normal(0.0, 0.05, size=grid.vertices.shape)
    value, grad = laplacian_loss(positions, grid.umbrella, return_grad=True)
    h = 1e-6
    plus, minus = positions.copy(), positions.copy()
    plus[7, 2] += h
    minus[7, 2] -= h
    numeric = (laplacian_loss(plus, grid.umbrella) - laplacian_loss(minus, grid.umbrella)) / (2 * h)
    assert value > 0
    assert numeric == pytest.approx(grad[7, 2], rel=1e-5, abs=1e-10)


def test_edge_length_loss_zero_for_rigid_motion(ico):
    angle = 0.4
    rotation = np.array([[np.cos(angle), -np.sin(angle), 0], [np.sin(angle), np.cos(angle), 0], [0, 0, 1]])
    moved = ico.vertices @ rotation.T + np.array([1.0, 2.0, 3.0])
    assert edge_length_loss(ico, moved) == pytest.approx(0.0, abs=1e-20)


def test_edge_length_loss_rejects_vertex_mismatch(ico):
    with pytest.raises(MeshError):
        edge_length_loss(ico, ico.vertices[:-1])


def test_normal_consistency_gradient(ico, rng):
    positions = ico.vertices + rng.normal(0.0, 0.05, size=ico.vertices.shape)
    value, grad = normal_consistency_loss(ico, positions, return_grad=True)
    h = 1e-6
    for i, k in [(0, 0), (5, 1), (11, 2)]:
        plus, minus = positions.copy(), positions.copy()
        plus[i, k] += h
        minus[i, k] -= h
        numeric = (normal_consistency_loss(ico, plus) - normal_consistency_loss(ico, minus)) / (2 * h)
        assert numeric == pytest.approx(grad[i, k], rel=1e-4, abs=1e-8)

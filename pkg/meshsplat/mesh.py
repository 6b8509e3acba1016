from __future__ import annotations

from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse

from .errors import MeshError

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])
_AREA_EPS = 1e-20


class Mesh:
    """Triangle mesh with eagerly built, read-only adjacency.

    Faces are counter-clockwise vertex-index triples. Manifold-ness is not
    required; boundary and non-manifold edges are fine.
    """

    def __init__(
        self,
        vertices: np.ndarray,
        faces: np.ndarray,
        vertex_colors: Optional[np.ndarray] = None,
    ):
        vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        if faces.size and np.any(
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        ):
            raise MeshError("degenerate face with repeated vertex index")
        if vertex_colors is not None:
            vertex_colors = np.array(vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(vertex_colors) != len(vertices):
                raise MeshError("vertex_colors length does not match vertex count")
            vertex_colors.flags.writeable = False
        vertices.flags.writeable = False
        faces.flags.writeable = False
        self.vertices = vertices
        self.faces = faces
        self.vertex_colors = vertex_colors
        self.edges = build_edge_set(faces)
        self.vertex_neighbors = build_vertex_neighbors(self.edges, len(vertices))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.vertex_colors)

    @cached_property
    def umbrella(self) -> sparse.csr_matrix:
        return umbrella_operator(self.vertex_neighbors)

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Vertices on edges used by exactly one face."""
        if not len(self.faces):
            return np.zeros(0, dtype=np.int64)
        pairs = np.sort(
            np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1
        )
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1].reshape(-1))

    def isolated_vertices(self) -> np.ndarray:
        return np.flatnonzero([len(n) == 0 for n in self.vertex_neighbors])

    def drop_isolated_vertices(self) -> "Mesh":
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.reshape(-1)] = True
        if used.all():
            return self
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(used.sum())
        colors = None if self.vertex_colors is None else self.vertex_colors[used]
        return Mesh(self.vertices[used], remap[self.faces], colors)


def build_edge_set(faces: np.ndarray) -> np.ndarray:
    """Unique unordered vertex pairs, sorted, shape (E, 2)."""
    if not len(faces):
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def build_vertex_neighbors(edges: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    neighbors: list[list[int]] = [[] for _ in range(n_vertices)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    return [np.array(sorted(n), dtype=np.int64) for n in neighbors]


def umbrella_operator(
    neighbors: Sequence[np.ndarray], fixed: Optional[np.ndarray] = None
) -> sparse.csr_matrix:
    """Sparse I - D^-1 A, so that (L @ V)_i = v_i - mean of neighbours.

    Rows listed in `fixed` are left empty (those vertices never move).
    Isolated vertices are an error unless they are fixed.
    """
    n = len(neighbors)
    held = np.zeros(n, dtype=bool)
    if fixed is not None:
        held[np.asarray(fixed, dtype=np.int64)] = True
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(neighbors):
        if held[i]:
            continue
        if len(nbrs) == 0:
            raise MeshError(f"vertex {i} is isolated; neighbour mean undefined")
        rows.append(np.full(len(nbrs), i))
        cols.append(np.asarray(nbrs))
        vals.append(np.full(len(nbrs), -1.0 / len(nbrs)))
    free = np.flatnonzero(~held)
    rows.append(free)
    cols.append(free)
    vals.append(np.ones(len(free)))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def face_cross_products(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (positions[faces[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(positions: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, dict]:
    """Area-weighted vertex normals plus the cache for the backward pass."""
    cross = face_cross_products(positions, faces)
    raw = np.zeros_like(positions)
    for k in range(3):
        np.add.at(raw, faces[:, k], cross)
    length = np.linalg.norm(raw, axis=1)
    degenerate = length < _AREA_EPS
    safe = np.where(degenerate, 1.0, length)
    normals = raw / safe[:, None]
    normals[degenerate] = FALLBACK_NORMAL
    return normals, {"raw_length": safe, "degenerate": degenerate, "normals": normals}


def vertex_normals_backward(
    positions: np.ndarray, faces: np.ndarray, cache: dict, grad_normals: np.ndarray
) -> np.ndarray:
    n = cache["normals"]
    g_raw = (grad_normals - n * np.sum(n * grad_normals, axis=1, keepdims=True)) / cache["raw_length"][:, None]
    g_raw[cache["degenerate"]] = 0.0
    g_cross = g_raw[faces[:, 0]] + g_raw[faces[:, 1]] + g_raw[faces[:, 2]]
    v0, v1, v2 = (positions[faces[:, k]] for k in range(3))
    e1, e2 = v1 - v0, v2 - v0
    g_e1 = np.cross(e2, g_cross)
    g_e2 = np.cross(g_cross, e1)
    grad = np.zeros_like(positions)
    np.add.at(grad, faces[:, 1], g_e1)
    np.add.at(grad, faces[:, 2], g_e2)
    np.add.at(grad, faces[:, 0], -(g_e1 + g_e2))
    return grad


def compute_vertex_normals(mesh: Mesh) -> np.ndarray:
    return vertex_normals(mesh.vertices, mesh.faces)[0]


def laplacian_loss(
    positions: np.ndarray,
    neighbors: Union[Sequence[np.ndarray], sparse.spmatrix],
    return_grad: bool = False,
):
    """(1/N) sum_i |v_i - mean of neighbours|^2."""
    op = neighbors if sparse.issparse(neighbors) else umbrella_operator(neighbors)
    delta = op @ positions
    n = len(positions)
    value = float(np.sum(delta * delta) / n)
    if not return_grad:
        return value
    return value, (2.0 / n) * (op.T @ delta)


def normal_consistency_loss(
    mesh: Mesh, positions: Optional[np.ndarray] = None, return_grad: bool = False
):
    """Mean over edges of |n_i - n_j| for area-weighted vertex normals."""
    positions = mesh.vertices if positions is None else positions
    edges = mesh.edges
    if not len(edges):
        return (0.0, np.zeros_like(positions)) if return_grad else 0.0
    normals, cache = vertex_normals(positions, mesh.faces)
    diff = normals[edges[:, 0]] - normals[edges[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    value = float(dist.mean())
    if not return_grad:
        return value
    g_diff = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0) / len(edges)
    g_normals = np.zeros_like(positions)
    np.add.at(g_normals, edges[:, 0], g_diff)
    np.add.at(g_normals, edges[:, 1], -g_diff)
    return value, vertex_normals_backward(positions, mesh.faces, cache, g_normals)


def edge_length_loss(canonical: Mesh, deformed_positions: np.ndarray, return_grad: bool = False):
    """Mean over edges of (rest length - deformed length)^2."""
    deformed_positions = np.asarray(deformed_positions, dtype=np.float64)
    if deformed_positions.shape != canonical.vertices.shape:
        raise MeshError(
            f"vertex count mismatch: canonical {canonical.n_vertices}, deformed {len(deformed_positions)}"
        )
    edges = canonical.edges
    if not len(edges):
        return (0.0, np.zeros_like(deformed_positions)) if return_grad else 0.0
    i, j = edges[:, 0], edges[:, 1]
    rest = np.linalg.norm(canonical.vertices[i] - canonical.vertices[j], axis=1)
    vec = deformed_positions[i] - deformed_positions[j]
    length = np.linalg.norm(vec, axis=1)
    residual = rest - length
    value = float(np.mean(residual**2))
    if not return_grad:
        return value
    safe = np.where(length > 0, length, 1.0)
    g_vec = (-2.0 * residual / len(edges) / safe)[:, None] * vec
    g_vec[length == 0] = 0.0
    grad = np.zeros_like(deformed_positions)
    np.add.at(grad, i, g_vec)
    np.add.at(grad, j, -g_vec)
    return value, grad

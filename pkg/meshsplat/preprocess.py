"""Prior-mesh clean-up: smoothing, face-count control, rigid alignment, sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateInputError
from .mesh import Mesh, face_cross_products, umbrella_operator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise DegenerateInputError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self after inner."""
        return RigidTransform(self.rotation @ inner.rotation, self.rotation @ inner.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def taubin_smooth(mesh: Mesh, lam: float = 0.5, mu: float = -0.53, iterations: int = 10) -> Mesh:
    """Alternating shrink/inflate umbrella steps; topology is untouched.

    Boundary and isolated vertices are held in place.
    """
    if not (lam > 0 > mu and abs(mu) > lam):
        raise ConfigError(f"taubin needs lambda > 0 > mu and |mu| > lambda, got {lam}, {mu}")
    if iterations <= 0:
        return mesh
    fixed = np.union1d(mesh.boundary_vertices, mesh.isolated_vertices())
    op = umbrella_operator(mesh.vertex_neighbors, fixed=fixed)
    positions = np.array(mesh.vertices)
    for _ in range(iterations):
        positions = positions - lam * (op @ positions)
        positions = positions - mu * (op @ positions)
    return mesh.with_vertices(positions)


def _edge_faces(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    table: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(faces):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (i, j) if i < j else (j, i)
            table.setdefault(key, []).append(fi)
    return table


def _split_longest_edge(vertices: list, colors, faces: list) -> None:
    positions = np.asarray(vertices)
    table = _edge_faces(np.asarray(faces))
    keys = sorted(table)
    lengths = np.array([np.linalg.norm(positions[i] - positions[j]) for i, j in keys])
    i, j = keys[int(np.argmax(lengths))]
    m = len(vertices)
    vertices.append(0.5 * (positions[i] + positions[j]))
    if colors is not None:
        colors.append(0.5 * (np.asarray(colors[i]) + np.asarray(colors[j])))
    for fi in table[(i, j)]:
        tri = list(faces[fi])
        # rotate so that the split edge is (tri[0], tri[1]) in winding order
        while not ({tri[0], tri[1]} == {i, j}):
            tri = tri[1:] + tri[:1]
        a, b, c = tri
        faces[fi] = [a, m, c]
        faces.append([m, b, c])


def _try_collapse(positions: np.ndarray, faces: np.ndarray, i: int, j: int):
    """Collapse edge (i, j) into i at the midpoint; None if a face would flip."""
    midpoint = 0.5 * (positions[i] + positions[j])
    has_i = np.any(faces == i, axis=1)
    has_j = np.any(faces == j, axis=1)
    removed = has_i & has_j
    touched = (has_i | has_j) & ~removed
    new_faces = np.where(faces == j, i, faces)
    new_positions = positions.copy()
    new_positions[i] = midpoint
    before = face_cross_products(positions, faces[touched])
    after = face_cross_products(new_positions, new_faces[touched])
    if np.any(np.sum(before * after, axis=1) <= 0.0):
        return None
    return new_positions, new_faces[~removed]


def resize_to_face_count(mesh: Mesh, target_faces: int) -> Mesh:
    """Longest-edge splits or flip-guarded shortest-edge collapses until
    the face count is within 3 of the target."""
    if target_faces < 4:
        raise ConfigError(f"target face count must be >= 4, got {target_faces}")
    if abs(mesh.n_faces - target_faces) <= 3:
        return mesh
    colors = None if mesh.vertex_colors is None else [c for c in mesh.vertex_colors]
    if mesh.n_faces < target_faces:
        vertices = [v for v in mesh.vertices]
        faces = [list(f) for f in mesh.faces]
        while len(faces) < target_faces:
            _split_longest_edge(vertices, colors, faces)
        return Mesh(np.asarray(vertices), np.asarray(faces), None if colors is None else np.asarray(colors))

    positions = np.array(mesh.vertices)
    color_array = None if colors is None else np.array(mesh.vertex_colors)
    faces = np.array(mesh.faces)
    while len(faces) > target_faces + 3:
        edges = Mesh(positions, faces).edges
        lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
        collapsed = False
        for e in np.argsort(lengths, kind="stable"):
            i, j = int(edges[e, 0]), int(edges[e, 1])
            result = _try_collapse(positions, faces, i, j)
            if result is None:
                continue
            positions, faces = result
            if color_array is not None:
                color_array[i] = 0.5 * (color_array[i] + color_array[j])
            collapsed = True
            break
        if not collapsed:
            logger.warning("resize stopped at %d faces; target %d unreachable without inverting faces",
                           len(faces), target_faces)
            break
    return Mesh(positions, faces, color_array).drop_isolated_vertices()


def _best_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    src_c = source.mean(axis=0)
    dst_c = target.mean(axis=0)
    h = (source - src_c).T @ (target - dst_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, dst_c - rotation @ src_c)


def _check_spread(points: np.ndarray, name: str) -> None:
    if len(points) < 3:
        raise DegenerateInputError(f"{name} needs at least 3 points")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateInputError(f"{name} points are collinear or coincident")


def rigid_icp(
    source: np.ndarray,
    target: np.ndarray,
    max_iters: int = 50,
    tol: float = 1e-8,
    paired: bool = False,
) -> RigidTransform:
    """Point-to-point ICP; returns the transform taking source onto target.

    With ``paired`` the i-th source point is matched to the i-th target point.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_spread(source, "source")
    _check_spread(target, "target")
    if paired:
        if source.shape != target.shape:
            raise DegenerateInputError("paired ICP needs equally sized point sets")
        return _best_fit(source, target)

    tree = cKDTree(target)
    transform = RigidTransform()
    previous_rms = np.inf
    iteration = 0
    for iteration in range(max_iters):
        moved = transform.apply(source)
        dist, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dist**2)))
        if abs(previous_rms - rms) < tol:
            break
        previous_rms = rms
        transform = _best_fit(source, target[idx])
    logger.debug("icp stopped after %d iterations, rms %.3e", iteration + 1, previous_rms)
    return transform


def farthest_point_sampling(points: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection starting from ``seed_index``; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise DegenerateInputError(f"cannot sample {k} points from {len(points)}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = [int(seed_index)]
    dist = np.linalg.norm(points - points[seed_index], axis=1)
    while len(chosen) < k:
        idx = int(np.argmax(dist))
        chosen.append(idx)
        dist = np.minimum(dist, np.linalg.norm(points - points[idx], axis=1))
    return np.asarray(chosen, dtype=np.int64)

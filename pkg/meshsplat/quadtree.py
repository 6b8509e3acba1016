"""Hierarchical Gaussian faces living on mesh faces.

Every tree face owns a parent Gaussian and four child Gaussians placed on the
faces obtained by splitting the face at three learnable edge points. Corners
are stored as barycentric coordinates with respect to the root mesh face, so
Gaussians follow the mesh as it deforms.

Point numbering inside a face is [P0, P1, P2, E0, E1, E2] where edge point
E_k sits on the edge P_k -> P_{k+1} at ratio s_k.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import PopulationConfig
from .errors import TreeError
from .mesh import Mesh
from .nn import logit, sigmoid, softmax, softmax_backward

logger = logging.getLogger(__name__)

CHILD_CORNERS = np.array([[0, 3, 5], [1, 4, 3], [2, 5, 4], [3, 4, 5]])
# row 0 is the parent face itself, rows 1..4 the children
_GAUSSIAN_CORNERS = np.vstack([[0, 1, 2], CHILD_CORNERS])
_NEXT = np.array([1, 2, 0])

INITIAL_PARENT_OPACITY = 0.99
OPACITY_CLAMP = 1e-4
DEFAULT_BETA = 0.9


def child_opacity(alpha_parent, beta: float = DEFAULT_BETA):
    """(1 - alpha^beta)^(1/beta): the competitive opacity of a parent's children."""
    alpha = np.clip(np.asarray(alpha_parent, dtype=np.float64), 0.0, 1.0)
    return np.power(np.maximum(1.0 - np.power(alpha, beta), 0.0), 1.0 / beta)


def child_opacity_grad(alpha_parent, beta: float = DEFAULT_BETA):
    alpha = np.clip(np.asarray(alpha_parent, dtype=np.float64), 0.0, 1.0)
    rest = np.maximum(1.0 - np.power(alpha, beta), 0.0)
    safe = np.where(alpha > 0.0, alpha, 1.0)
    grad = -np.power(safe, beta - 1.0) * np.power(rest, 1.0 / beta - 1.0)
    return np.where(alpha > 0.0, grad, -np.inf if beta < 1.0 else -1.0)


def interpolate_features(c_logits: np.ndarray, f1: np.ndarray, f2: np.ndarray, f3: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(c_logits, dtype=np.float64)) @ np.stack([f1, f2, f3])


def gaussian_position(r_logits: np.ndarray, corner_positions: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(r_logits, dtype=np.float64)) @ np.asarray(corner_positions, dtype=np.float64)


@dataclass
class GaussianBatch:
    """Snapshot of every rendered Gaussian, in face order then parent/child order."""

    face: np.ndarray
    kind: np.ndarray
    root: np.ndarray
    depth: np.ndarray
    corner_bary: np.ndarray
    corner_features: np.ndarray
    position_weights: np.ndarray
    feature_weights: np.ndarray
    bary: np.ndarray
    features: np.ndarray
    opacity: np.ndarray
    # per active face
    faces: np.ndarray
    local: np.ndarray
    corner_rows: np.ndarray
    ratios: np.ndarray
    face_points: np.ndarray
    face_corner_features: np.ndarray
    parent_alpha: np.ndarray

    def __len__(self) -> int:
        return len(self.face)

    @property
    def is_parent(self) -> np.ndarray:
        return self.kind < 0


@dataclass
class ControlReport:
    step: int
    subdivided: list
    deactivated: list
    skipped_max_depth: int = 0


class GaussianQuadTree:
    """Struct-of-arrays quad tree; row i of every per-face array describes tree face i."""

    PARAMETERS = (
        "features", "edge_features", "ratio_logits", "parent_r", "parent_c",
        "child_r", "child_c", "opacity_logits",
    )

    def __init__(self, mesh: Mesh, feature_dim: int = 128, beta: float = DEFAULT_BETA, max_depth: int = 6):
        n = mesh.n_faces
        self.mesh_faces = np.array(mesh.faces)
        self.n_vertices = mesh.n_vertices
        self.feature_dim = int(feature_dim)
        self.beta = float(beta)
        self.max_depth = int(max_depth)

        self.features = np.zeros((mesh.n_vertices, feature_dim))
        self.root = np.arange(n, dtype=np.int64)
        self.depth = np.zeros(n, dtype=np.int64)
        self.parent = -np.ones(n, dtype=np.int64)
        self.corner_bary = np.tile(np.eye(3), (n, 1, 1))
        self.corner_slot = np.array(mesh.faces, dtype=np.int64)
        self.edge_features = np.zeros((n, 3, feature_dim))
        self.ratio_logits = np.zeros((n, 3))
        self.parent_r = np.zeros((n, 3))
        self.parent_c = np.zeros((n, 3))
        self.child_r = np.zeros((n, 4, 3))
        self.child_c = np.zeros((n, 4, 3))
        self.opacity_logits = np.full(n, logit(INITIAL_PARENT_OPACITY))
        self.active = np.ones(n, dtype=bool)
        self.deactivated = np.zeros((n, 4), dtype=bool)
        self.subdivided_into = -np.ones((n, 4), dtype=np.int64)
        self.high_count = np.zeros(n, dtype=np.int64)
        self.tracked = 0

    @property
    def n_faces(self) -> int:
        return len(self.root)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"tree.{name}": getattr(self, name) for name in self.PARAMETERS}

    @staticmethod
    def parameter_group(name: str) -> str:
        return "opacity" if name == "tree.opacity_logits" else "gaussian"

    def parent_opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian_count(self) -> int:
        faces = self.active
        return int(faces.sum() + np.sum(~self.deactivated[faces]))

    def face_points(self, face: int) -> tuple[np.ndarray, np.ndarray]:
        """Barycentrics and features of [P0, P1, P2, E0, E1, E2] for one face."""
        s = sigmoid(self.ratio_logits[face])
        corners = self.corner_bary[face]
        feats = self.features[self.corner_slot[face]]
        edge_pts = (1.0 - s)[:, None] * corners + s[:, None] * corners[_NEXT]
        edge_feats = (1.0 - s)[:, None] * feats + s[:, None] * feats[_NEXT] + self.edge_features[face]
        return np.vstack([corners, edge_pts]), np.vstack([feats, edge_feats])

    def child_vertex_features(self, face: int, which_child: int) -> np.ndarray:
        if not self.active[face]:
            raise TreeError(f"face {face} is not an active parent")
        _, feats = self.face_points(face)
        return feats[CHILD_CORNERS[which_child]]

    def child_corner_bary(self, face: int, which_child: int) -> np.ndarray:
        bary, _ = self.face_points(face)
        return bary[CHILD_CORNERS[which_child]]

    def gaussians(self) -> GaussianBatch:
        faces = np.flatnonzero(self.active)
        s = sigmoid(self.ratio_logits[faces])
        corners = self.corner_bary[faces]
        feats = self.features[self.corner_slot[faces]]
        edge_pts = (1.0 - s)[..., None] * corners + s[..., None] * corners[:, _NEXT]
        edge_feats = (1.0 - s)[..., None] * feats + s[..., None] * feats[:, _NEXT] + self.edge_features[faces]
        points = np.concatenate([corners, edge_pts], axis=1)
        point_feats = np.concatenate([feats, edge_feats], axis=1)

        keep = np.concatenate([np.ones((len(faces), 1), dtype=bool), ~self.deactivated[faces]], axis=1)
        local, slot = np.nonzero(keep)
        kind = slot - 1
        rows = _GAUSSIAN_CORNERS[slot]
        face = faces[local]
        child = np.maximum(kind, 0)
        parent = kind < 0

        r_logits = np.where(parent[:, None], self.parent_r[face], self.child_r[face, child])
        c_logits = np.where(parent[:, None], self.parent_c[face], self.child_c[face, child])
        pw = softmax(r_logits, axis=1)
        fw = softmax(c_logits, axis=1)
        corner_bary = points[local[:, None], rows]
        corner_features = point_feats[local[:, None], rows]
        alpha = sigmoid(self.opacity_logits[faces])
        opacity = np.where(parent, alpha[local], child_opacity(alpha, self.beta)[local])
        return GaussianBatch(
            face=face, kind=kind, root=self.root[face], depth=self.depth[face] + (~parent),
            corner_bary=corner_bary, corner_features=corner_features,
            position_weights=pw, feature_weights=fw,
            bary=np.einsum("gi,gij->gj", pw, corner_bary),
            features=np.einsum("gi,gid->gd", fw, corner_features),
            opacity=opacity, faces=faces, local=local, corner_rows=rows, ratios=s,
            face_points=points, face_corner_features=feats, parent_alpha=alpha,
        )

    def backward(self, batch: GaussianBatch, grad_bary: np.ndarray, grad_corner_bary: np.ndarray,
                 grad_features: np.ndarray, grad_feature_weights: np.ndarray,
                 grad_opacity: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients from gradients on a batch's derived quantities.

        ``grad_corner_bary`` and ``grad_feature_weights`` hold only the direct
        uses of those quantities; the paths through ``bary`` and ``features``
        are added here.
        """
        pw, fw = batch.position_weights, batch.feature_weights
        g_pw = np.einsum("gj,gij->gi", grad_bary, batch.corner_bary)
        g_cb = grad_corner_bary + np.einsum("gi,gj->gij", pw, grad_bary)
        g_fw = grad_feature_weights + np.einsum("gd,gid->gi", grad_features, batch.corner_features)
        g_cf = fw[:, :, None] * grad_features[:, None, :]
        g_r = softmax_backward(pw, g_pw, axis=1)
        g_c = softmax_backward(fw, g_fw, axis=1)

        grads = {f"tree.{name}": np.zeros_like(getattr(self, name)) for name in self.PARAMETERS}
        parent = batch.is_parent
        np.add.at(grads["tree.parent_r"], batch.face[parent], g_r[parent])
        np.add.at(grads["tree.parent_c"], batch.face[parent], g_c[parent])
        np.add.at(grads["tree.child_r"], (batch.face[~parent], batch.kind[~parent]), g_r[~parent])
        np.add.at(grads["tree.child_c"], (batch.face[~parent], batch.kind[~parent]), g_c[~parent])

        n_active = len(batch.faces)
        g_points = np.zeros((n_active, 6, 3))
        g_point_feats = np.zeros((n_active, 6, self.feature_dim))
        np.add.at(g_points, (batch.local[:, None], batch.corner_rows), g_cb)
        np.add.at(g_point_feats, (batch.local[:, None], batch.corner_rows), g_cf)

        s = batch.ratios
        corners = batch.face_points[:, :3]
        feats = batch.face_corner_features
        g_edge_pts, g_edge_feats = g_points[:, 3:], g_point_feats[:, 3:]
        g_s = np.sum(g_edge_pts * (corners[:, _NEXT] - corners), axis=-1)
        g_s += np.sum(g_edge_feats * (feats[:, _NEXT] - feats), axis=-1)
        g_feats = g_point_feats[:, :3] + (1.0 - s)[..., None] * g_edge_feats
        g_feats[:, _NEXT] += s[..., None] * g_edge_feats

        grads["tree.ratio_logits"][batch.faces] = g_s * s * (1.0 - s)
        grads["tree.edge_features"][batch.faces] = g_edge_feats
        np.add.at(grads["tree.features"], self.corner_slot[batch.faces], g_feats)

        g_parent_alpha = np.zeros(n_active)
        g_child_alpha = np.zeros(n_active)
        np.add.at(g_parent_alpha, batch.local[parent], grad_opacity[parent])
        np.add.at(g_child_alpha, batch.local[~parent], grad_opacity[~parent])
        alpha = batch.parent_alpha
        has_children = g_child_alpha != 0.0
        slope = np.zeros(n_active)
        slope[has_children] = g_child_alpha[has_children] * child_opacity_grad(alpha[has_children], self.beta)
        grads["tree.opacity_logits"][batch.faces] = (g_parent_alpha + slope) * alpha * (1.0 - alpha)
        return grads

    def _append(self, count: int) -> np.ndarray:
        start = self.n_faces
        d = self.feature_dim

        def grow(array: np.ndarray, fill) -> np.ndarray:
            extra = np.full((count,) + array.shape[1:], fill, dtype=array.dtype)
            return np.concatenate([array, extra])

        self.root = grow(self.root, 0)
        self.depth = grow(self.depth, 0)
        self.parent = grow(self.parent, -1)
        self.corner_bary = grow(self.corner_bary, 0.0)
        self.corner_slot = grow(self.corner_slot, 0)
        self.edge_features = np.concatenate([self.edge_features, np.zeros((count, 3, d))])
        self.ratio_logits = grow(self.ratio_logits, 0.0)
        self.parent_r = grow(self.parent_r, 0.0)
        self.parent_c = grow(self.parent_c, 0.0)
        self.child_r = grow(self.child_r, 0.0)
        self.child_c = grow(self.child_c, 0.0)
        self.opacity_logits = grow(self.opacity_logits, 0.0)
        self.active = grow(self.active, True)
        self.deactivated = grow(self.deactivated, False)
        self.subdivided_into = grow(self.subdivided_into, -1)
        self.high_count = grow(self.high_count, 0)
        return np.arange(start, start + count)

    def subdivide(self, face: int) -> bool:
        """Turn the four children of ``face`` into parents; returns False at max depth."""
        if not self.active[face]:
            raise TreeError(f"face {face} is not an active parent")
        if self.depth[face] >= self.max_depth:
            logger.warning("face %d already at max depth %d; not subdividing", face, self.max_depth)
            return False
        points, point_feats = self.face_points(face)
        slot_base = len(self.features)
        self.features = np.concatenate([self.features, point_feats[3:]])
        point_slots = np.concatenate([self.corner_slot[face], slot_base + np.arange(3)])

        alpha = float(sigmoid(self.opacity_logits[face]))
        child_alpha = float(np.clip(child_opacity(alpha, self.beta), OPACITY_CLAMP, 1.0 - OPACITY_CLAMP))
        new = self._append(4)
        self.root[new] = self.root[face]
        self.depth[new] = self.depth[face] + 1
        self.parent[new] = face
        self.corner_bary[new] = points[CHILD_CORNERS]
        self.corner_slot[new] = point_slots[CHILD_CORNERS]
        self.parent_r[new] = self.child_r[face]
        self.parent_c[new] = self.child_c[face]
        self.opacity_logits[new] = logit(child_alpha)
        self.active[face] = False
        self.subdivided_into[face] = new
        self.high_count[face] = 0
        return True

    def record_opacity_stats(self, threshold: float = 0.9) -> None:
        self.high_count += self.active & (self.parent_opacity() > threshold)
        self.tracked += 1

    def reset_opacity_stats(self) -> None:
        self.high_count[:] = 0
        self.tracked = 0

    def audit(self) -> bool:
        """Check link symmetry, depth consistency and barycentric validity."""
        for face in range(self.n_faces):
            kids = self.subdivided_into[face]
            if self.active[face]:
                if np.any(kids >= 0):
                    raise TreeError(f"active face {face} has subdivision links")
            elif np.any(kids < 0):
                raise TreeError(f"inactive face {face} lacks subdivision links")
            for kid in kids[kids >= 0]:
                if self.parent[kid] != face or self.depth[kid] != self.depth[face] + 1:
                    raise TreeError(f"face {kid} is not a consistent child of {face}")
                if self.root[kid] != self.root[face]:
                    raise TreeError(f"face {kid} changed root face")
            if self.parent[face] >= 0 and face not in self.subdivided_into[self.parent[face]]:
                raise TreeError(f"face {face} is missing from its parent's links")
        bary = self.corner_bary
        if np.any(bary < -1e-12) or not np.allclose(bary.sum(axis=-1), 1.0, atol=1e-9):
            raise TreeError("corner barycentrics left the simplex")
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        names = self.PARAMETERS + (
            "root", "depth", "parent", "corner_bary", "corner_slot", "active",
            "deactivated", "subdivided_into", "high_count", "mesh_faces",
        )
        arrays = {name: getattr(self, name) for name in names}
        arrays["scalars"] = np.array([self.feature_dim, self.max_depth, self.tracked, self.n_vertices])
        arrays["beta"] = np.array([self.beta])
        return arrays

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "GaussianQuadTree":
        tree = cls.__new__(cls)
        for name, value in arrays.items():
            if name not in ("scalars", "beta"):
                setattr(tree, name, np.array(value))
        feature_dim, max_depth, tracked, n_vertices = (int(v) for v in arrays["scalars"])
        tree.feature_dim, tree.max_depth, tree.tracked, tree.n_vertices = feature_dim, max_depth, tracked, n_vertices
        tree.beta = float(arrays["beta"][0])
        return tree


def init_tree(mesh: Mesh, feature_dim: int = 128, beta: float = DEFAULT_BETA, max_depth: int = 6) -> GaussianQuadTree:
    return GaussianQuadTree(mesh, feature_dim=feature_dim, beta=beta, max_depth=max_depth)


def is_control_step(step: int, total_steps: int, config: PopulationConfig) -> bool:
    if step <= 0 or step % config.cadence:
        return False
    return config.warmup <= step < total_steps - config.warmup


def population_control(tree: GaussianQuadTree, step: int, config: PopulationConfig,
                       total_steps: Optional[int] = None) -> Optional[ControlReport]:
    """Run one control event if ``step`` falls on the cadence outside the warmup windows.

    Parents below the low threshold subdivide; parents that stayed above the
    high threshold for enough tracked steps lose their children for good.
    Parents whose children were already switched off are not subdivided.
    """
    total_steps = total_steps if total_steps is not None else step + config.warmup + 1
    if not is_control_step(step, total_steps, config):
        return None
    report = ControlReport(step=step, subdivided=[], deactivated=[])
    existing = tree.n_faces
    opacity = tree.parent_opacity()
    low = np.flatnonzero(tree.active & (opacity < config.subdivide_below) & ~tree.deactivated.any(axis=1))
    for face in low:
        if tree.subdivide(int(face)):
            report.subdivided.append(int(face))
        else:
            report.skipped_max_depth += 1

    if config.pruning and tree.tracked > 0:
        candidates = np.flatnonzero(tree.active[:existing] & ~tree.deactivated[:existing].all(axis=1))
        enough = tree.high_count[candidates] >= config.deactivate_fraction * tree.tracked
        for face in candidates[enough]:
            tree.deactivated[face] = True
            report.deactivated.append(int(face))
    tree.reset_opacity_stats()
    logger.info("population control at step %d: %d subdivided, %d deactivated, %d gaussians",
                step, len(report.subdivided), len(report.deactivated), tree.gaussian_count())
    return report

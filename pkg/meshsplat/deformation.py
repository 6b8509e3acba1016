"""Control-point deformation field driving canonical vertices through time."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ScheduleConfig, Stage1Weights
from .errors import DegenerateInputError, MeshError
from .losses import robust_chamfer
from .mesh import Mesh, laplacian_loss, normal_consistency_loss
from .nn import Adam, LrSchedule, Mlp, encode, softmax
from .preprocess import farthest_point_sampling

logger = logging.getLogger(__name__)

LEVEL_COUNTS = (2, 4, 8, 16)
ANCHOR_LOGIT = 50.0
TIME_FREQUENCIES = 4


def level_temperatures(n_levels: int = 4) -> np.ndarray:
    """T_{l+1} = T_l / 2 with the finest level at 1."""
    return 2.0 ** np.arange(n_levels - 1, -1, -1, dtype=np.float64)


@dataclass
class ControlPointSet:
    anchor_logits: np.ndarray
    temperatures: np.ndarray
    levels: np.ndarray
    rbf_scale: np.ndarray

    @property
    def count(self) -> int:
        return len(self.temperatures)


def _softmax_anchors(anchor_logits: np.ndarray, temperatures: np.ndarray) -> np.ndarray:
    return softmax(anchor_logits / temperatures[:, None], axis=1)


def anchor_positions(control_points: ControlPointSet, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if control_points.anchor_logits.shape[1] != len(vertices):
        raise MeshError(
            f"anchor logits cover {control_points.anchor_logits.shape[1]} vertices, mesh has {len(vertices)}"
        )
    probs = _softmax_anchors(control_points.anchor_logits, control_points.temperatures)
    return probs @ vertices, probs


def init_control_points(canonical: Mesh, counts_per_level: Sequence[int] = LEVEL_COUNTS,
                        seed_index: int = 0) -> ControlPointSet:
    total = int(sum(counts_per_level))
    if canonical.n_vertices < total:
        raise DegenerateInputError(f"need at least {total} vertices for control points, got {canonical.n_vertices}")
    chosen = farthest_point_sampling(canonical.vertices, total, seed_index)
    temps = level_temperatures(len(counts_per_level))
    levels = np.repeat(np.arange(len(counts_per_level)), counts_per_level)
    logits = np.zeros((total, canonical.n_vertices))
    logits[np.arange(total), chosen] = ANCHOR_LOGIT
    cps = ControlPointSet(logits, temps[levels], levels, np.ones(total))
    positions, _ = anchor_positions(cps, canonical.vertices)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    cps.rbf_scale = np.full(total, float(dist.min(axis=1).mean()))
    return cps


@dataclass
class DeformState:
    t: float
    positions: np.ndarray
    control_positions: np.ndarray
    moving_control_positions: np.ndarray
    weights: np.ndarray
    motion: np.ndarray
    probs: np.ndarray
    weight_caches: list = field(default_factory=list)
    motion_caches: list = field(default_factory=list)
    kernels: list = field(default_factory=list)
    offsets: list = field(default_factory=list)


class DeformationField:
    """v_t = v_0 + sum_k c_k(t) w_k(v_0), with w_k = MLP_k(C_k - v_0) + rbf(|C_k - v_0|)."""

    def __init__(self, control_points: ControlPointSet, bbox_diagonal: float,
                 rng: Optional[np.random.Generator] = None, weight_hidden: int = 32, motion_hidden: int = 64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.control_points = control_points
        self.bbox_diagonal = float(bbox_diagonal)
        k = control_points.count
        self.weight_mlps = [
            Mlp([3, weight_hidden, weight_hidden, 1], output_activation="tanh", output_scale=0.5, rng=rng)
            for _ in range(k)
        ]
        time_width = 1 + 2 * TIME_FREQUENCIES
        self.motion_mlps = [
            Mlp([time_width, motion_hidden, motion_hidden, 3], output_scale=0.1 * self.bbox_diagonal,
                rng=rng, zero_last=True)
            for _ in range(k)
        ]

    @property
    def count(self) -> int:
        return self.control_points.count

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {"anchor_logits": self.control_points.anchor_logits}
        for k, mlp in enumerate(self.weight_mlps):
            params.update(mlp.named_parameters(f"weight_mlp.{k}"))
        for k, mlp in enumerate(self.motion_mlps):
            params.update(mlp.named_parameters(f"motion_mlp.{k}"))
        return params

    @staticmethod
    def parameter_group(name: str) -> str:
        return "anchor" if name == "anchor_logits" else "mlp"

    def skinning_weights(self, canonical: Mesh) -> np.ndarray:
        return self._weights(canonical.vertices)[0]

    def _weights(self, vertices: np.ndarray):
        centers, probs = anchor_positions(self.control_points, vertices)
        weights = np.empty((len(vertices), self.count))
        caches, kernels, offsets = [], [], []
        for k, mlp in enumerate(self.weight_mlps):
            offset = centers[k] - vertices
            learned, cache = mlp.forward(offset)
            sigma = self.control_points.rbf_scale[k]
            kernel = np.exp(-np.sum(offset * offset, axis=1) / (2.0 * sigma * sigma))
            weights[:, k] = learned[:, 0] + kernel
            caches.append(cache)
            kernels.append(kernel)
            offsets.append(offset)
        return weights, centers, probs, caches, kernels, offsets

    def motion(self, t: float) -> tuple[np.ndarray, list]:
        enc = encode(np.array([float(t)]), TIME_FREQUENCIES)
        out, caches = [], []
        for mlp in self.motion_mlps:
            c, cache = mlp.forward(enc)
            out.append(c)
            caches.append(cache)
        return np.stack(out), caches

    def forward(self, canonical: Mesh, t: float) -> DeformState:
        weights, centers, probs, w_caches, kernels, offsets = self._weights(canonical.vertices)
        motion, m_caches = self.motion(t)
        positions = canonical.vertices + weights @ motion
        return DeformState(
            t=float(t), positions=positions, control_positions=centers,
            moving_control_positions=centers + motion, weights=weights, motion=motion, probs=probs,
            weight_caches=w_caches, motion_caches=m_caches, kernels=kernels, offsets=offsets,
        )

    def deform(self, canonical: Mesh, t: float) -> np.ndarray:
        return self.forward(canonical, t).positions

    def backward(self, canonical: Mesh, state: DeformState, grad_positions: np.ndarray,
                 grad_moving_controls: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dL/dv_t and optionally dL/d(C_k + c_k(t))."""
        grads: dict[str, np.ndarray] = {}
        g_weights = grad_positions @ state.motion.T
        g_motion = state.weights.T @ grad_positions
        g_centers = np.zeros_like(state.control_positions)
        if grad_moving_controls is not None:
            g_motion = g_motion + grad_moving_controls
            g_centers += grad_moving_controls

        for k, mlp in enumerate(self.motion_mlps):
            mg, _ = mlp.backward(state.motion_caches[k], g_motion[k])
            grads.update(Mlp.named_gradients(f"motion_mlp.{k}", mg))

        for k, mlp in enumerate(self.weight_mlps):
            gw = g_weights[:, k]
            wg, g_offset = mlp.backward(state.weight_caches[k], gw[:, None])
            grads.update(Mlp.named_gradients(f"weight_mlp.{k}", wg))
            sigma = self.control_points.rbf_scale[k]
            g_offset = g_offset - (gw * state.kernels[k])[:, None] * state.offsets[k] / (sigma * sigma)
            g_centers[k] += g_offset.sum(axis=0)

        vertices = canonical.vertices
        temps = self.control_points.temperatures
        proj = g_centers @ vertices.T - np.sum(state.control_positions * g_centers, axis=1, keepdims=True)
        grads["anchor_logits"] = state.probs * proj / temps[:, None]
        return grads


def control_point_positions(deformation: DeformationField, canonical: Mesh) -> np.ndarray:
    return anchor_positions(deformation.control_points, canonical.vertices)[0]


def skinning_weights(deformation: DeformationField, canonical: Mesh) -> np.ndarray:
    return deformation.skinning_weights(canonical)


def deform_vertices(deformation: DeformationField, canonical: Mesh, t: float) -> np.ndarray:
    return deformation.deform(canonical, t)


def frame_times(n_frames: int) -> np.ndarray:
    if n_frames <= 1:
        return np.zeros(max(n_frames, 0))
    return np.arange(n_frames) / (n_frames - 1)


def stage1_loss(deformation: DeformationField, canonical: Mesh, target: np.ndarray, t: float,
                weights: Stage1Weights, truncation: float, with_grad: bool = True):
    """Weighted stage-one objective for one frame; returns (parts, grads)."""
    state = deformation.forward(canonical, t)
    rcd, g_rcd = robust_chamfer(state.positions, target, truncation, return_grad=True)
    lap, g_lap = laplacian_loss(state.positions, canonical.umbrella, return_grad=True)
    nc, g_nc = normal_consistency_loss(canonical, state.positions, return_grad=True)
    total = weights.w_rcd * rcd + weights.w_lap * lap + weights.w_n * nc
    parts = {"rcd": rcd, "lap": lap, "normal": nc, "total": total}
    if not with_grad:
        return parts, None
    g_positions = weights.w_rcd * g_rcd + weights.w_lap * g_lap + weights.w_n * g_nc
    return parts, deformation.backward(canonical, state, g_positions)


@dataclass
class Stage1Result:
    deformation: DeformationField
    deformed: list[Mesh]
    trace: list[dict]


def stage1_fit(
    canonical: Mesh,
    target_sequence: Sequence[Mesh],
    weights: Stage1Weights,
    schedule: ScheduleConfig,
    steps: int,
    truncation: Optional[float] = None,
    seed: int = 0,
    deformation: Optional[DeformationField] = None,
    log_every: int = 500,
) -> Stage1Result:
    """Fit the field by visiting frames in temporal order, one frame per step."""
    if not target_sequence:
        raise DegenerateInputError("stage one needs at least one target mesh")
    if deformation is None:
        rng = np.random.default_rng(seed)
        deformation = DeformationField(init_control_points(canonical), canonical.bbox_diagonal(), rng=rng)
    truncation = truncation if truncation is not None else 0.05 * canonical.bbox_diagonal()
    times = frame_times(len(target_sequence))
    optimizer = Adam({
        "mlp": LrSchedule(schedule.mlp_lr_start, schedule.mlp_lr_end, steps),
        "anchor": LrSchedule(schedule.anchor_lr),
    })
    params = deformation.named_parameters()
    groups = {name: deformation.parameter_group(name) for name in params}
    trace = []
    for step in range(steps):
        frame = step % len(target_sequence)
        parts, grads = stage1_loss(deformation, canonical, target_sequence[frame].vertices, times[frame],
                                   weights, truncation)
        optimizer.step(params, grads, groups)
        trace.append({"step": step, "frame": frame, **parts})
        if log_every and step % log_every == 0:
            logger.info("stage1 step %d frame %d rcd %.4e total %.4e", step, frame, parts["rcd"], parts["total"])
    deformed = [canonical.with_vertices(deformation.deform(canonical, t)) for t in times]
    return Stage1Result(deformation, deformed, trace)

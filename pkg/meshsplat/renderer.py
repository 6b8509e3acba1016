"""CPU surfel rasterizer with an exact reverse pass.

Each pixel ray is intersected with every candidate surfel plane. Samples are
composited front to back per pixel; a layer loop walks the k-th nearest
sample of every pixel at once. Pixel rows are split into fixed blocks that
are rendered independently and joined in block order.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decoders import SurfelGrads, SurfelSet
from .errors import RenderError

logger = logging.getLogger(__name__)

NEAR = 0.01
CUTOFF_SIGMA = 3.0
PARALLEL_EPS = 1e-8
# rgb, depth, camera-space normal, flow, coverage
CHANNELS = 10


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward); x_cam = R x + t."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise RenderError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise RenderError(f"image size must be positive, got {self.width}x{self.height}")
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9) or np.linalg.det(rotation) < 0:
            raise RenderError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def look_at(cls, eye, target, up, fx: float, fy: float, width: int, height: int,
                cx: Optional[float] = None, cy: Optional[float] = None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise RenderError("look_at up vector is parallel to the view direction")
        right /= norm
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, rotation, -rotation @ eye)

    @property
    def origin(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
        uv = np.stack([self.fx * cam[..., 0] / safe + self.cx, self.fy * cam[..., 1] / safe + self.cy], axis=-1)
        return uv, z

    def ray_directions(self) -> np.ndarray:
        """World-space directions through pixel centres, scaled so camera z is 1."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        cam = np.stack([
            (j.reshape(-1) + 0.5 - self.cx) / self.fx,
            (i.reshape(-1) + 0.5 - self.cy) / self.fy,
            np.ones(self.width * self.height),
        ], axis=1)
        return cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Camera":
        try:
            return cls(float(record["fx"]), float(record["fy"]), float(record["cx"]), float(record["cy"]),
                       int(record["width"]), int(record["height"]),
                       np.array(record["rotation"], dtype=np.float64), np.array(record["translation"], dtype=np.float64))
        except KeyError as e:
            raise RenderError(f"camera record is missing {e}")


@dataclass
class BlockRecord:
    row_start: int
    row_stop: int
    pixel: np.ndarray
    surfel: np.ndarray
    rank: np.ndarray
    alpha: np.ndarray
    gauss: np.ndarray
    q: np.ndarray
    a: np.ndarray
    b: np.ndarray
    offset: np.ndarray
    dn: np.ndarray
    transmittance: np.ndarray
    payload: np.ndarray


@dataclass
class RenderOutput:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    flow: np.ndarray
    surfels: SurfelSet
    camera: Camera
    background: np.ndarray
    records: Optional[list[BlockRecord]] = None
    surfel_flow: Optional[np.ndarray] = None


def _check_finite(surfels: SurfelSet) -> None:
    for name in ("center", "tangent_u", "tangent_v", "scale", "normal", "opacity", "color", "flow_anchor"):
        value = getattr(surfels, name)
        if value is None or not len(value):
            continue
        value = np.asarray(value)
        bad = ~np.isfinite(value.reshape(len(value), -1)).all(axis=1)
        if bad.any():
            raise RenderError(f"surfel {int(np.flatnonzero(bad)[0])} has a non-finite {name}")


def _surfel_flow(surfels: SurfelSet, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    if surfels.flow_anchor is None:
        return np.zeros((len(surfels), 2)), np.zeros(len(surfels), dtype=bool)
    now, z_now = camera.project(surfels.center)
    before, z_before = camera.project(surfels.flow_anchor)
    ok = (z_now > NEAR) & (z_before > NEAR)
    return np.where(ok[:, None], now - before, 0.0), ok


def _candidates(surfels: SurfelSet, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(pixel, surfel) pairs whose pixel centre may fall inside the 3-sigma footprint."""
    visible = (surfels.opacity > 0) & (surfels.scale[:, 0] > 0) & (surfels.scale[:, 1] > 0)
    ids = np.flatnonzero(visible)
    if not len(ids):
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    su = CUTOFF_SIGMA * surfels.scale[ids, 0, None]
    sv = CUTOFF_SIGMA * surfels.scale[ids, 1, None]
    u, v = surfels.tangent_u[ids], surfels.tangent_v[ids]
    c = surfels.center[ids]
    corners = np.stack([c + su * u + sv * v, c + su * u - sv * v, c - su * u + sv * v, c - su * u - sv * v], axis=1)
    uv, z = camera.project(corners)
    behind = np.any(z <= NEAR, axis=1)
    w, h = camera.width, camera.height
    j0 = np.where(behind, 0, np.ceil(uv[..., 0].min(axis=1) - 0.5))
    j1 = np.where(behind, w - 1, np.floor(uv[..., 0].max(axis=1) - 0.5))
    i0 = np.where(behind, 0, np.ceil(uv[..., 1].min(axis=1) - 0.5))
    i1 = np.where(behind, h - 1, np.floor(uv[..., 1].max(axis=1) - 0.5))
    j0, j1 = np.clip(j0, 0, w).astype(np.int64), np.clip(j1, -1, w - 1).astype(np.int64)
    i0, i1 = np.clip(i0, 0, h).astype(np.int64), np.clip(i1, -1, h - 1).astype(np.int64)
    cols = np.maximum(j1 - j0 + 1, 0)
    rows = np.maximum(i1 - i0 + 1, 0)
    counts = cols * rows
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(ids)), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    width = np.maximum(cols[owner], 1)
    row = i0[owner] + within // width
    col = j0[owner] + within % width
    return row * w + col, ids[owner]


def _layers(rank: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(rank, kind="stable")
    bounds = np.cumsum(np.bincount(rank))
    return np.split(order, bounds[:-1])


def _render_block(surfels: SurfelSet, camera: Camera, origin: np.ndarray, directions: np.ndarray,
                  surfel_flow: np.ndarray, background: np.ndarray, row_start: int, row_stop: int,
                  pixel: np.ndarray, surfel: np.ndarray) -> tuple[np.ndarray, BlockRecord]:
    w = camera.width
    n_pix = (row_stop - row_start) * w
    d = directions[pixel]
    c = surfels.center[surfel]
    n = surfels.normal[surfel]
    dn = np.sum(d * n, axis=1)
    safe_dn = np.where(np.abs(dn) >= PARALLEL_EPS, dn, 1.0)
    tau = np.sum((c - origin) * n, axis=1) / safe_dn
    offset = origin + tau[:, None] * d - c
    a = np.sum(offset * surfels.tangent_u[surfel], axis=1)
    b = np.sum(offset * surfels.tangent_v[surfel], axis=1)
    su, sv = surfels.scale[surfel, 0], surfels.scale[surfel, 1]
    q = a * a / (su * su) + b * b / (sv * sv)
    keep = (np.abs(dn) >= PARALLEL_EPS) & (tau >= NEAR) & (q <= CUTOFF_SIGMA * CUTOFF_SIGMA)
    gauss = np.exp(-0.5 * q)
    alpha = surfels.opacity[surfel] * gauss
    keep &= alpha > 0.0

    idx = np.flatnonzero(keep)
    local = pixel[idx] - row_start * w
    order = idx[np.lexsort((tau[idx], local))]
    local = pixel[order] - row_start * w
    starts = np.r_[True, local[1:] != local[:-1]] if len(order) else np.zeros(0, dtype=bool)
    first = np.maximum.accumulate(np.where(starts, np.arange(len(order)), 0)) if len(order) else starts
    rank = np.arange(len(order)) - first

    s = surfel[order]
    payload = np.empty((len(order), CHANNELS))
    payload[:, 0:3] = surfels.color[s]
    payload[:, 3] = tau[order]
    payload[:, 4:7] = surfels.normal[s] @ camera.rotation.T
    payload[:, 7:9] = surfel_flow[s]
    payload[:, 9] = 1.0

    out = np.zeros((n_pix, CHANNELS))
    trans = np.ones(n_pix)
    sample_t = np.empty(len(order))
    sample_alpha = alpha[order]
    if len(order):
        for layer in _layers(rank):
            pix = local[layer]
            t = trans[pix]
            sample_t[layer] = t
            out[pix] += (t * sample_alpha[layer])[:, None] * payload[layer]
            trans[pix] = t * (1.0 - sample_alpha[layer])
    out += trans[:, None] * background[None, :]
    record = BlockRecord(
        row_start=row_start, row_stop=row_stop, pixel=local, surfel=s, rank=rank, alpha=sample_alpha,
        gauss=gauss[order], q=q[order], a=a[order], b=b[order], offset=offset[order], dn=dn[order],
        transmittance=sample_t, payload=payload,
    )
    return out, record


def _blocks(camera: Camera, rows_per_block: int) -> list[tuple[int, int]]:
    return [(r, min(r + rows_per_block, camera.height)) for r in range(0, camera.height, rows_per_block)]


def rasterize(
    surfels: SurfelSet,
    camera: Camera,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    rows_per_block: int = 8,
    workers: int = 1,
) -> RenderOutput:
    _check_finite(surfels)
    bg = np.zeros(CHANNELS)
    bg[:3] = np.asarray(background, dtype=np.float64)
    origin = camera.origin
    directions = camera.ray_directions()
    flow, _ = _surfel_flow(surfels, camera)
    pixel, surfel = _candidates(surfels, camera)
    row = pixel // camera.width
    blocks = _blocks(camera, rows_per_block)
    block_of = row // rows_per_block
    order = np.argsort(block_of, kind="stable")
    bounds = np.searchsorted(block_of[order], np.arange(len(blocks) + 1))

    def run(k: int):
        sel = order[bounds[k]:bounds[k + 1]]
        start, stop = blocks[k]
        return _render_block(surfels, camera, origin, directions, flow, bg, start, stop, pixel[sel], surfel[sel])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(blocks))))
    else:
        results = [run(k) for k in range(len(blocks))]

    channels = np.concatenate([r[0] for r in results]).reshape(camera.height, camera.width, CHANNELS)
    logger.debug("rasterized %d surfels over %d candidate pairs", len(surfels), len(pixel))
    return RenderOutput(
        rgb=channels[..., 0:3], alpha=channels[..., 9], depth=channels[..., 3], normal=channels[..., 4:7],
        flow=channels[..., 7:9], surfels=surfels, camera=camera, background=bg,
        records=[r[1] for r in results], surfel_flow=flow,
    )


def _backward_block(output: RenderOutput, record: BlockRecord, grad: np.ndarray, origin: np.ndarray,
                    directions: np.ndarray) -> tuple[SurfelGrads, np.ndarray]:
    surfels, camera = output.surfels, output.camera
    w = camera.width
    n_pix = (record.row_stop - record.row_start) * w
    block_grad = grad[record.row_start * w:record.row_stop * w]
    partial = SurfelGrads.zeros(len(surfels))
    flow_grad = np.zeros((len(surfels), 2))
    k = len(record.surfel)
    if k == 0:
        return partial, flow_grad

    alpha, payload, trans = record.alpha, record.payload, record.transmittance
    g_alpha = np.zeros(k)
    g_payload = np.zeros((k, CHANNELS))
    behind = np.tile(output.background, (n_pix, 1))
    for layer in reversed(_layers(record.rank)):
        pix = record.pixel[layer]
        gp = block_grad[pix]
        g_alpha[layer] = trans[layer] * np.sum(gp * (payload[layer] - behind[pix]), axis=1)
        g_payload[layer] = (trans[layer] * alpha[layer])[:, None] * gp
        a_l = alpha[layer][:, None]
        behind[pix] = a_l * payload[layer] + (1.0 - a_l) * behind[pix]

    s = record.surfel
    d = directions[record.row_start * w + record.pixel]
    n = surfels.normal[s]
    u, v = surfels.tangent_u[s], surfels.tangent_v[s]
    su, sv = surfels.scale[s, 0], surfels.scale[s, 1]
    a, b, p, dn = record.a, record.b, record.offset, record.dn

    g_opacity = g_alpha * record.gauss
    g_q = -0.5 * record.gauss * surfels.opacity[s] * g_alpha
    g_a = g_q * 2.0 * a / (su * su)
    g_b = g_q * 2.0 * b / (sv * sv)
    g_su = -g_q * 2.0 * a * a / (su * su * su)
    g_sv = -g_q * 2.0 * b * b / (sv * sv * sv)
    g_tau = g_payload[:, 3]

    du = np.sum(d * u, axis=1)
    dv = np.sum(d * v, axis=1)
    g_c = ((g_a * du + g_b * dv + g_tau) / dn)[:, None] * n - g_a[:, None] * u - g_b[:, None] * v
    g_n = -((g_a * du + g_b * dv + g_tau) / dn)[:, None] * p + g_payload[:, 4:7] @ camera.rotation

    np.add.at(partial.center, s, g_c)
    np.add.at(partial.normal, s, g_n)
    np.add.at(partial.tangent_u, s, g_a[:, None] * p)
    np.add.at(partial.tangent_v, s, g_b[:, None] * p)
    np.add.at(partial.scale, s, np.stack([g_su, g_sv], axis=1))
    np.add.at(partial.opacity, s, g_opacity)
    np.add.at(partial.color, s, g_payload[:, 0:3])
    # flow is a per-surfel payload; its projection is differentiated after the reduction
    np.add.at(flow_grad, s, g_payload[:, 7:9])
    return partial, flow_grad


def rasterize_backward(
    output: RenderOutput,
    grad_rgb: Optional[np.ndarray] = None,
    grad_alpha: Optional[np.ndarray] = None,
    grad_depth: Optional[np.ndarray] = None,
    grad_normal: Optional[np.ndarray] = None,
    grad_flow: Optional[np.ndarray] = None,
    workers: int = 1,
) -> SurfelGrads:
    if output.records is None:
        raise RenderError("render output holds no backward records")
    camera = output.camera
    h, w = camera.height, camera.width
    grad = np.zeros((h, w, CHANNELS))
    if grad_rgb is not None:
        grad[..., 0:3] = grad_rgb
    if grad_depth is not None:
        grad[..., 3] = grad_depth
    if grad_normal is not None:
        grad[..., 4:7] = grad_normal
    if grad_flow is not None:
        grad[..., 7:9] = grad_flow
    if grad_alpha is not None:
        grad[..., 9] = grad_alpha
    grad = grad.reshape(h * w, CHANNELS)
    origin = camera.origin
    directions = camera.ray_directions()

    def run(record: BlockRecord) -> tuple[SurfelGrads, np.ndarray]:
        return _backward_block(output, record, grad, origin, directions)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run, output.records))
    else:
        partials = [run(r) for r in output.records]

    total = SurfelGrads.zeros(len(output.surfels))
    flow_grad = np.zeros((len(output.surfels), 2))
    for part, part_flow in partials:
        for name in ("center", "tangent_u", "tangent_v", "scale", "normal", "opacity", "color"):
            getattr(total, name).__iadd__(getattr(part, name))
        flow_grad += part_flow

    surfels = output.surfels
    if surfels.flow_anchor is not None and np.any(flow_grad):
        cam = camera.world_to_camera(surfels.center)
        _, ok = _surfel_flow(surfels, camera)
        z = np.where(ok, cam[:, 2], 1.0)
        g_cam = np.stack([
            camera.fx * flow_grad[:, 0] / z,
            camera.fy * flow_grad[:, 1] / z,
            -(camera.fx * flow_grad[:, 0] * cam[:, 0] + camera.fy * flow_grad[:, 1] * cam[:, 1]) / (z * z),
        ], axis=1)
        total.center += np.where(ok[:, None], g_cam @ camera.rotation, 0.0)
    return total


def cutoff_guard_mask(output: RenderOutput, inner_sigma: float = CUTOFF_SIGMA - 1.0) -> np.ndarray:
    """Pixels with a sample between ``inner_sigma`` and the 3-sigma cutoff."""
    camera = output.camera
    mask = np.zeros(camera.height * camera.width, dtype=bool)
    for record in output.records or []:
        near_edge = record.q > inner_sigma * inner_sigma
        mask[record.row_start * camera.width + record.pixel[near_edge]] = True
    return mask.reshape(camera.height, camera.width)

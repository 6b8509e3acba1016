"""Central finite-difference checks of the analytic gradients of both stages."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import TrainConfig
from .dataset import Frame, torus_mesh
from .deformation import DeformationField, init_control_points, stage1_loss
from .mesh import Mesh
from .pipeline import ALPHA_MASK, Stage2Model, stage2_loss
from .renderer import Camera, RenderOutput, cutoff_guard_mask

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
# relative errors are measured against at least this magnitude
FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    checked: int
    skipped: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_array(
    name: str,
    param: np.ndarray,
    analytic: np.ndarray,
    evaluate: Callable[[], tuple[float, object]],
    rng: np.random.Generator,
    samples: Optional[int] = None,
    step: float = STEP,
) -> GradCheckResult:
    """Compare entries of ``analytic`` against central differences of ``evaluate``.

    Every entry is checked unless ``samples`` asks for a random subset.
    ``evaluate`` returns (loss, signature). An entry is skipped when the
    signature differs between the + and - evaluations.
    """
    flat = param.reshape(-1)
    grad = np.asarray(analytic).reshape(-1)
    if samples is None or samples >= flat.size:
        picks = np.arange(flat.size)
    else:
        picks = rng.choice(flat.size, size=samples, replace=False)
    worst, checked, skipped = 0.0, 0, 0
    for i in picks:
        original = flat[i]
        flat[i] = original + step
        plus, sig_plus = evaluate()
        flat[i] = original - step
        minus, sig_minus = evaluate()
        flat[i] = original
        if sig_plus != sig_minus:
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(float(grad[i]), numeric))
        checked += 1
    return GradCheckResult(name, checked, skipped, worst)


def _perturb_last_layers(deformation: DeformationField, rng: np.random.Generator, scale: float = 0.05) -> None:
    for mlp in deformation.motion_mlps:
        mlp.params[-2][:] = rng.normal(0.0, scale, size=mlp.params[-2].shape)
        mlp.params[-1][:] = rng.normal(0.0, scale, size=mlp.params[-1].shape)


def stage1_case(seed: int = 0) -> tuple[Mesh, np.ndarray, DeformationField]:
    """A 50-vertex torus, a jittered target and a field with live motion outputs."""
    rng = np.random.default_rng(seed)
    canonical = torus_mesh(0.7, 0.25, 10, 5)
    target = canonical.vertices + rng.normal(0.0, 0.02, size=canonical.vertices.shape)
    deformation = DeformationField(init_control_points(canonical), canonical.bbox_diagonal(), rng=rng)
    deformation.control_points.anchor_logits += rng.normal(0.0, 0.5, size=deformation.control_points.anchor_logits.shape)
    _perturb_last_layers(deformation, rng)
    return canonical, target, deformation


def check_stage1(seed: int = 0, samples: Optional[int] = None) -> list[GradCheckResult]:
    config = TrainConfig()
    canonical, target, deformation = stage1_case(seed)
    t = 0.3
    truncation = 0.25 * canonical.bbox_diagonal()
    weights = config.weights.stage1
    _, grads = stage1_loss(deformation, canonical, target, t, weights, truncation)

    def evaluate():
        parts, _ = stage1_loss(deformation, canonical, target, t, weights, truncation, with_grad=False)
        return parts["total"], None

    rng = np.random.default_rng(seed + 1)
    params = deformation.named_parameters()
    return [check_array(f"stage1/{name}", params[name], grads[name], evaluate, rng, samples)
            for name in sorted(params)]


def stage2_case(seed: int = 0, resolution: int = 16) -> tuple[Stage2Model, list[Frame], TrainConfig]:
    """Two faces, every tree quantity randomized, one camera at ``resolution`` squared."""
    rng = np.random.default_rng(seed)
    config = TrainConfig.model_validate({
        "feature_dim": 8, "decoder_hidden": 8, "pose_dim": 4,
        "render": {"rows_per_block": 4},
    })
    vertices = np.array([[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.05], [-0.5, 0.5, 0.0]])
    canonical = Mesh(vertices, [[0, 1, 2], [0, 2, 3]], 0.2 + 0.3 * rng.random((4, 3)))
    cps = init_control_points(canonical, counts_per_level=(1, 1, 1, 1))
    deformation = DeformationField(cps, canonical.bbox_diagonal(), rng=rng, weight_hidden=8, motion_hidden=8)
    _perturb_last_layers(deformation, rng)
    model = Stage2Model.create(canonical, deformation, config)

    tree = model.tree
    tree.features[:] = rng.normal(0.0, 0.3, size=tree.features.shape)
    tree.edge_features[:] = rng.normal(0.0, 0.1, size=tree.edge_features.shape)
    tree.ratio_logits[:] = rng.normal(0.0, 0.3, size=tree.ratio_logits.shape)
    for name in ("parent_r", "parent_c", "child_r", "child_c"):
        getattr(tree, name)[:] = rng.normal(0.0, 0.5, size=getattr(tree, name).shape)
    tree.opacity_logits[:] = rng.normal(0.0, 0.5, size=tree.opacity_logits.shape)
    offset = model.decoders.offset
    offset.params[-2][:] = rng.normal(0.0, 0.3, size=offset.params[-2].shape)

    fx = 0.5 * resolution / np.tan(np.deg2rad(20.0))
    camera = Camera.look_at((0.4, -1.2, 2.2), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), fx, fx, resolution, resolution)
    shape = (resolution, resolution)
    normal = rng.normal(size=shape + (3,))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    frames = [
        Frame(0, 0.0, camera, rng.random(shape + (3,))),
        Frame(1, 0.5, camera, rng.random(shape + (3,)), None, rng.normal(0.0, 0.5, size=shape + (2,)), normal),
    ]
    return model, frames, config


def sample_counts(output: RenderOutput) -> np.ndarray:
    """Number of in-cutoff samples composited at each pixel."""
    camera = output.camera
    counts = np.zeros(camera.height * camera.width, dtype=np.int64)
    for record in output.records or []:
        np.add.at(counts, record.row_start * camera.width + record.pixel, 1)
    return counts.reshape(camera.height, camera.width)


def check_stage2(seed: int = 0, samples: Optional[int] = None,
                 resolution: int = 16) -> list[GradCheckResult]:
    """Stage-two gradients, excluding only entries that move a guard-band sample across the cutoff.

    The signature of an evaluation is the per-pixel sample count inside the
    guard band of the unperturbed render, together with the coverage mask
    that gates the flow and normal terms.
    """
    model, frames, config = stage2_case(seed, resolution)
    # anchors carry no gradient, so they stay fixed while perturbing
    _, _, reference = stage2_loss(model, frames, 1, config, "static", with_grad=False)
    anchors = reference.surfels.flow_anchor.copy()
    _, grads, output = stage2_loss(model, frames, 1, config, "static", anchors=anchors)
    guard = cutoff_guard_mask(output)
    logger.info("stage two check: %d surfels, %d guard-band pixels", len(output.surfels), int(guard.sum()))

    def evaluate():
        parts, _, out = stage2_loss(model, frames, 1, config, "static", with_grad=False, anchors=anchors)
        return parts["total"], (sample_counts(out)[guard].tobytes(), (out.alpha > ALPHA_MASK).tobytes())

    rng = np.random.default_rng(seed + 1)
    params = model.named_parameters()
    return [check_array(f"stage2/{name}", params[name], grads[name], evaluate, rng, samples)
            for name in sorted(params)]


def run_gradcheck(seed: int = 0, samples: Optional[int] = None,
                  stages: Optional[tuple[str, ...]] = None) -> list[GradCheckResult]:
    stages = stages or ("stage1", "stage2")
    results: list[GradCheckResult] = []
    if "stage1" in stages:
        results += check_stage1(seed, samples)
    if "stage2" in stages:
        results += check_stage2(seed, samples)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("%d gradient checks above tolerance: %s", len(failed), ", ".join(failed))
    return results

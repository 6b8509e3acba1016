"""Stage-one and stage-two training runs, checkpoints, rendering and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import TrainConfig, dump_config
from .dataset import Frame, FrameDataset
from .decoders import AppearanceDecoders, build_surfels
from .deformation import ControlPointSet, DeformationField, frame_times, stage1_fit
from .errors import CheckpointError, ConfigError, DatasetError
from .files import load_checkpoint, prefixed, save_checkpoint, subtree, write_csv, write_float_map, write_obj, write_png
from .losses import (
    STAGE2_TERMS, alpha_loss, flow_loss, l1_loss, normal_loss, psnr, robust_chamfer, ssim, stage2_term_weights,
    stage2_total,
)
from .mesh import Mesh, edge_length_loss, laplacian_loss
from .nn import Adam, LrSchedule, Mlp, PoseEncoder
from .preprocess import resize_to_face_count, rigid_icp, taubin_smooth
from .quadtree import GaussianQuadTree, init_tree, population_control
from .renderer import Camera, RenderOutput, rasterize, rasterize_backward

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STAGE1_COLUMNS = ["step", "frame", "rcd", "lap", "normal", "total"]
STAGE2_COLUMNS = ["step", "frame", *STAGE2_TERMS, "total", "psnr", "gaussians", "subdivided", "deactivated"]
METRIC_COLUMNS = ["view", "frames", "psnr", "ssim", "chamfer_x1e3", "gaussians"]
ABLATION_FLAGS = ("offset", "pruning", "scale")
ALPHA_MASK = 0.5
GRID_COLUMNS = 6


def _run_dirs(run_dir: PathLike) -> Path:
    run_dir = Path(run_dir)
    for sub in ("checkpoints", "renders", "meshes"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _restore(named: dict[str, np.ndarray], arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, param in named.items():
        key = f"{prefix}.{name}" if prefix else name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing {key}")
        if arrays[key].shape != param.shape:
            raise CheckpointError(f"{key} has shape {arrays[key].shape}, model expects {param.shape}")
        param[...] = arrays[key]


# stage one

def prepare_priors(dataset: FrameDataset, config: TrainConfig) -> tuple[Mesh, list[Mesh]]:
    """Smooth, resize and optionally rigidly align every prior mesh; returns (canonical, targets)."""
    if not dataset.prior_meshes:
        raise DatasetError("dataset has no mesh sequence")
    pp = config.preprocess
    smoothed = [taubin_smooth(m, pp.taubin_lambda, pp.taubin_mu, pp.taubin_iterations) for m in dataset.prior_meshes]
    canonical = resize_to_face_count(smoothed[dataset.canonical_index].drop_isolated_vertices(), pp.initial_faces)
    use_icp = pp.icp_mode == "always" or (pp.icp_mode == "auto" and not dataset.prior_registered)
    targets = []
    for mesh in smoothed:
        mesh = resize_to_face_count(mesh.drop_isolated_vertices(), pp.initial_faces)
        if use_icp:
            transform = rigid_icp(mesh.vertices, canonical.vertices, max_iters=pp.icp_iterations)
            mesh = mesh.with_vertices(transform.apply(mesh.vertices))
        targets.append(mesh)
    logger.info("prepared %d priors; canonical mesh has %d vertices and %d faces (icp %s)",
                len(targets), canonical.n_vertices, canonical.n_faces, "on" if use_icp else "off")
    return canonical, targets


def _canonical_arrays(canonical: Mesh) -> dict[str, np.ndarray]:
    arrays = {"canonical.vertices": canonical.vertices, "canonical.faces": canonical.faces}
    if canonical.vertex_colors is not None:
        arrays["canonical.colors"] = canonical.vertex_colors
    return arrays


def _deformation_arrays(deformation: DeformationField) -> dict[str, np.ndarray]:
    cps = deformation.control_points
    arrays = prefixed(deformation.named_parameters(), "deformation")
    arrays.update({
        "deformation.temperatures": cps.temperatures,
        "deformation.levels": cps.levels,
        "deformation.rbf_scale": cps.rbf_scale,
        "deformation.bbox_diagonal": np.array([deformation.bbox_diagonal]),
    })
    return arrays


def _load_canonical(arrays: dict[str, np.ndarray]) -> Mesh:
    try:
        return Mesh(arrays["canonical.vertices"], arrays["canonical.faces"], arrays.get("canonical.colors"))
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing {e}")


def _load_deformation(arrays: dict[str, np.ndarray], canonical: Mesh) -> DeformationField:
    try:
        logits = arrays["deformation.anchor_logits"]
        cps = ControlPointSet(np.array(logits), arrays["deformation.temperatures"],
                              arrays["deformation.levels"], arrays["deformation.rbf_scale"])
        diagonal = float(arrays["deformation.bbox_diagonal"][0])
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing {e}")
    if logits.shape[1] != canonical.n_vertices:
        raise CheckpointError(
            f"checkpoint anchors cover {logits.shape[1]} vertices, canonical mesh has {canonical.n_vertices}"
        )
    deformation = DeformationField(cps, diagonal)
    _restore(deformation.named_parameters(), arrays, "deformation")
    return deformation


def run_stage1(dataset: FrameDataset, config: TrainConfig, run_dir: PathLike) -> Path:
    """Fit the deformation field to the prior mesh sequence and write the stage-one checkpoint."""
    run_dir = _run_dirs(run_dir)
    dump_config(config, run_dir / "config.resolved")
    canonical, targets = prepare_priors(dataset, config)
    truncation = config.weights.rcd_truncation
    result = stage1_fit(
        canonical, targets, config.weights.stage1, config.schedule, config.stage1.steps,
        truncation=truncation, seed=config.seed, log_every=config.render.log_every,
    )
    write_csv(run_dir / "losses.csv", result.trace, STAGE1_COLUMNS)
    for i, mesh in enumerate(result.deformed):
        write_obj(run_dir / "meshes" / f"deformed_{i:04d}.obj", mesh)
    for i, mesh in enumerate(targets):
        write_obj(run_dir / "meshes" / f"prior_{i:04d}.obj", mesh)
    meta = {"stage": 1, "frames": len(targets), "camera_mode": dataset.camera_mode,
            "prior_vertices": [mesh.n_vertices for mesh in dataset.mesh_sequence],
            "config": config.model_dump(mode="json")}
    arrays = {**_canonical_arrays(canonical), **_deformation_arrays(result.deformation)}
    path = save_checkpoint(run_dir / "checkpoints" / "stage1.npz", arrays, meta)
    logger.info("stage one finished: rcd %.4e -> %.4e", result.trace[0]["rcd"], result.trace[-1]["rcd"])
    return path


# stage two

@dataclass
class Stage2Model:
    canonical: Mesh
    deformation: DeformationField
    tree: GaussianQuadTree
    decoders: AppearanceDecoders
    pose: PoseEncoder

    @classmethod
    def create(cls, canonical: Mesh, deformation: DeformationField, config: TrainConfig) -> "Stage2Model":
        rng = np.random.default_rng(config.seed)
        tree = init_tree(canonical, config.feature_dim, config.beta, config.population.max_depth)
        decoders = AppearanceDecoders(
            config.feature_dim, config.pose_dim, config.decoder_hidden, rng=rng,
            offset_constraint=config.ablation.offset_constraint, scale_constraint=config.ablation.scale_constraint,
            offset_u_mode=config.offset_u_mode,
        )
        pose = PoseEncoder(deformation.count, config.pose_dim, config.decoder_hidden, rng=rng)
        return cls(canonical, deformation, tree, decoders, pose)

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = prefixed(self.deformation.named_parameters(), "deformation")
        params.update(self.tree.named_parameters())
        params.update(self.decoders.named_parameters())
        params.update(self.pose.mlp.named_parameters("pose"))
        return params

    def parameter_groups(self, names) -> dict[str, str]:
        groups = {}
        for name in names:
            if name.startswith("deformation."):
                groups[name] = self.deformation.parameter_group(name[len("deformation."):])
            elif name.startswith("tree."):
                groups[name] = self.tree.parameter_group(name)
            else:
                groups[name] = "mlp"
        return groups

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {**_canonical_arrays(self.canonical), **_deformation_arrays(self.deformation)}
        arrays.update(prefixed(self.tree.state_arrays(), "tree_state"))
        arrays.update(self.decoders.named_parameters())
        arrays.update(self.pose.mlp.named_parameters("pose"))
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: TrainConfig) -> "Stage2Model":
        canonical = _load_canonical(arrays)
        deformation = _load_deformation(arrays, canonical)
        model = cls.create(canonical, deformation, config)
        state = subtree(arrays, "tree_state")
        if not state:
            raise CheckpointError("checkpoint holds no quad tree")
        model.tree = GaussianQuadTree.from_state(state)
        model.tree.audit()
        _restore(model.decoders.named_parameters(), arrays)
        _restore(model.pose.mlp.named_parameters("pose"), arrays)
        return model

    def deformed_positions(self, t: float) -> np.ndarray:
        return self.deformation.deform(self.canonical, t)

    def render(self, camera: Camera, t: float, previous_t: Optional[float] = None,
               background=(1.0, 1.0, 1.0), rows_per_block: int = 8, workers: int = 1) -> RenderOutput:
        state = self.deformation.forward(self.canonical, t)
        pose = self.pose.forward(state.moving_control_positions)[0]
        previous_positions = previous_pose = None
        if previous_t is not None:
            prev = self.deformation.forward(self.canonical, previous_t)
            previous_positions = prev.positions
            previous_pose = self.pose.forward(prev.moving_control_positions)[0]
        surfels, _ = build_surfels(self.tree, state.positions, self.decoders, pose, self.canonical,
                                   previous_positions, previous_pose)
        return rasterize(surfels, camera, background, rows_per_block, workers)


def stage2_loss(model: Stage2Model, frames: Sequence[Frame], index: int, config: TrainConfig,
                camera_mode: str = "orbit", workers: int = 1, with_grad: bool = True,
                anchors: Optional[np.ndarray] = None):
    """Stage-two objective for one frame; returns (parts, grads, render output).

    ``parts`` holds every term (zero when inactive) and the weighted total.
    ``anchors`` replaces the flow anchors built from the previous frame.
    """
    frame = frames[index]
    weights = stage2_term_weights(config.weights.stage2, camera_mode)
    canonical, tree, decoders = model.canonical, model.tree, model.decoders

    state = model.deformation.forward(canonical, frame.timestamp)
    pose, pose_cache = model.pose.forward(state.moving_control_positions)
    batch = tree.gaussians()
    previous_positions = previous_pose = None
    if index > 0 and anchors is None:
        prev = model.deformation.forward(canonical, frames[index - 1].timestamp)
        previous_positions = prev.positions
        previous_pose = model.pose.forward(prev.moving_control_positions)[0]
    surfels, cache = build_surfels(tree, state.positions, decoders, pose, canonical,
                                   previous_positions, previous_pose, batch)
    if anchors is not None:
        surfels.flow_anchor = anchors
    output = rasterize(surfels, frame.camera, config.render.background, config.render.rows_per_block, workers)

    parts = dict.fromkeys(STAGE2_TERMS, 0.0)
    parts["l1"], g_l1 = l1_loss(output.rgb, frame.rgb, return_grad=True)
    similarity, g_ssim = ssim(output.rgb, frame.rgb, return_grad=True)
    parts["ssim"] = 1.0 - similarity
    g_rgb = weights["l1"] * g_l1 - weights["ssim"] * g_ssim

    covered = output.alpha > ALPHA_MASK
    g_flow = g_normal = None
    if index > 0 and frame.flow is not None and weights["flow"] > 0:
        parts["flow"], g = flow_loss(output.flow, frame.flow, covered, return_grad=True)
        g_flow = weights["flow"] * g
    if frame.normal is not None and weights["normal"] > 0:
        parts["normal"], g = normal_loss(output.normal, frame.normal, covered, return_grad=True)
        g_normal = weights["normal"] * g
    parts["edge"], g_edge = edge_length_loss(canonical, state.positions, return_grad=True)
    parts["lap"], g_lap = laplacian_loss(state.positions, canonical.umbrella, return_grad=True)
    parts["alpha"], g_alpha = alpha_loss(tree, return_grad=True)
    parts["total"] = stage2_total({k: parts[k] for k in STAGE2_TERMS}, weights)
    if not with_grad:
        return parts, None, output

    surfel_grads = rasterize_backward(output, grad_rgb=g_rgb, grad_normal=g_normal, grad_flow=g_flow,
                                      workers=workers)
    dec = decoders.backward(cache, surfel_grads)
    grads = dict(dec["params"])
    grads.update(tree.backward(batch, dec["bary"], dec["corner_bary"], dec["features"],
                               dec["feature_weights"], dec["opacity"]))
    grads["tree.opacity_logits"] = grads["tree.opacity_logits"] + weights["alpha"] * g_alpha
    g_positions = dec["positions"] + weights["edge"] * g_edge + weights["lap"] * g_lap
    pose_grads, g_moving = model.pose.backward(pose_cache, dec["pose"])
    grads.update(Mlp.named_gradients("pose", pose_grads))
    grads.update(prefixed(model.deformation.backward(canonical, state, g_positions, g_moving), "deformation"))
    return parts, grads, output


def load_stage1(checkpoint: PathLike) -> tuple[Mesh, DeformationField, dict]:
    arrays, meta = load_checkpoint(checkpoint)
    if meta.get("stage") != 1:
        raise CheckpointError(f"expected a stage-one checkpoint, got stage {meta.get('stage')}")
    canonical = _load_canonical(arrays)
    return canonical, _load_deformation(arrays, canonical), meta


def _snapshot(model: Stage2Model, frame: Frame, config: TrainConfig, path: Path, workers: int) -> float:
    output = model.render(frame.camera, frame.timestamp, background=config.render.background,
                          rows_per_block=config.render.rows_per_block, workers=workers)
    write_png(path, output.rgb)
    return psnr(output.rgb, frame.rgb)


def train_stage2(model: Stage2Model, dataset: FrameDataset, config: TrainConfig, run_dir: Optional[Path] = None,
                 workers: int = 1) -> tuple[list[dict], list[dict]]:
    """The stage-two loop; returns (per-step trace, snapshot rows)."""
    steps = config.stage2.steps
    schedule = config.schedule
    optimizer = Adam({
        "mlp": LrSchedule(schedule.mlp_lr_start, schedule.mlp_lr_end, steps),
        "gaussian": LrSchedule(schedule.gaussian_lr),
        "opacity": LrSchedule(schedule.opacity_lr),
        "anchor": LrSchedule(schedule.anchor_lr),
    })
    rng = np.random.default_rng(config.seed + 1)
    frames = dataset.frames
    trace, snapshots = [], []
    for step in range(steps):
        index = int(rng.integers(len(frames)))
        parts, grads, output = stage2_loss(model, frames, index, config, dataset.camera_mode, workers)
        params = model.named_parameters()
        optimizer.step(params, grads, model.parameter_groups(params))
        model.tree.record_opacity_stats(config.population.deactivate_above)
        report = population_control(model.tree, step, config.population, steps)
        row = {"step": step, "frame": index, **parts, "psnr": psnr(output.rgb, frames[index].rgb),
               "gaussians": model.tree.gaussian_count(),
               "subdivided": len(report.subdivided) if report else 0,
               "deactivated": len(report.deactivated) if report else 0}
        trace.append(row)
        if step % config.render.log_every == 0:
            logger.info("stage2 step %d frame %d total %.4e psnr %.2f gaussians %d",
                        step, index, parts["total"], row["psnr"], row["gaussians"])
        if run_dir is not None and ((step + 1) % config.render.snapshot_every == 0 or step == steps - 1):
            value = _snapshot(model, frames[dataset.canonical_index], config,
                              run_dir / "renders" / f"step_{step + 1:06d}.png", workers)
            snapshots.append({"step": step + 1, "psnr": value})
    return trace, snapshots


def run_stage2(dataset: FrameDataset, stage1_checkpoint: PathLike, config: TrainConfig, run_dir: PathLike,
               workers: int = 1) -> Path:
    run_dir = _run_dirs(run_dir)
    dump_config(config, run_dir / "config.resolved")
    canonical, deformation, meta = load_stage1(stage1_checkpoint)
    if meta.get("frames") not in (None, len(dataset.frames)):
        raise CheckpointError(f"checkpoint was fitted to {meta['frames']} frames, dataset has {len(dataset.frames)}")
    fitted = meta.get("prior_vertices")
    current = [mesh.n_vertices for mesh in dataset.mesh_sequence]
    if fitted is not None and current and list(fitted) != current:
        changed = next(i for i, (a, b) in enumerate(zip(fitted, current)) if a != b)
        raise CheckpointError(f"checkpoint mismatch: vertex count changed for prior mesh {changed} "
                              f"({fitted[changed]} -> {current[changed]})")
    model =Stage2Model.create(canonical, deformation, config)
    logger.info("stage two: %d gaussians on %d faces, %d steps", model.tree.gaussian_count(),
                canonical.n_faces, config.stage2.steps)

    trace, snapshots = train_stage2(model, dataset, config, run_dir, workers)
    write_csv(run_dir / "losses.csv", trace, STAGE2_COLUMNS)
    write_csv(run_dir / "snapshots.csv", snapshots, ["step", "psnr"])
    for i, t in enumerate(dataset.timestamps):
        write_obj(run_dir / "meshes" / f"deformed_{i:04d}.obj", canonical.with_vertices(model.deformed_positions(t)))
    meta = {"stage": 2, "frames": len(dataset.frames), "camera_mode": dataset.camera_mode,
            "config": config.model_dump(mode="json"), "steps": config.stage2.steps}
    return save_checkpoint(run_dir / "checkpoints" / "stage2.npz", model.state_arrays(), meta)


def load_stage2(checkpoint: PathLike) -> tuple[Stage2Model, TrainConfig, dict]:
    arrays, meta = load_checkpoint(checkpoint)
    if meta.get("stage") != 2:
        raise CheckpointError(f"expected a stage-two checkpoint, got stage {meta.get('stage')}")
    config = TrainConfig.model_validate(meta.get("config", {}))
    return Stage2Model.from_arrays(arrays, config), config, meta


# rendering and evaluation

def _load_camera_path(path: PathLike) -> list[Camera]:
    try:
        records = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"camera path not found: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"camera path {path} is not valid JSON: {e}")
    if isinstance(records, dict):
        records = records.get("cameras", [])
    if not records:
        raise DatasetError(f"camera path {path} holds no cameras")
    return [Camera.from_dict(r) for r in records]


def render_cmd(checkpoint: PathLike, camera_path: PathLike, timesteps: Sequence[float], out_dir: PathLike,
               workers: int = 1) -> list[Path]:
    """Render one image per timestep; camera i of the path goes with timestep i, cycling."""
    model, config, _ = load_stage2(checkpoint)
    cameras = _load_camera_path(camera_path)
    if not len(timesteps):
        raise ConfigError("no timesteps to render")
    if any(not 0.0 <= t <= 1.0 for t in timesteps):
        raise ConfigError("timesteps must lie in [0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, t in enumerate(timesteps):
        output = model.render(cameras[i % len(cameras)], float(t), background=config.render.background,
                              rows_per_block=config.render.rows_per_block, workers=workers)
        path = out_dir / f"frame_{i:04d}.png"
        write_png(path, output.rgb)
        write_png(out_dir / f"alpha_{i:04d}.png", output.alpha)
        write_float_map(out_dir / f"depth_{i:04d}.fmap", output.depth)
        written.append(path)
    logger.info("rendered %d frames into %s", len(written), out_dir)
    return written


def _image_grid(rows: list[list[np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate(row, axis=1) for row in rows], axis=0)


def evaluate(model: Stage2Model, dataset: FrameDataset, split: str, config: TrainConfig,
             workers: int = 1) -> tuple[list[dict], np.ndarray]:
    """Per-view metric rows and an image grid (ground truth above render for a few frames)."""
    reference = dataset.gt_meshes or dataset.prior_meshes
    chamfers = []
    for i, t in enumerate(dataset.timestamps):
        if i < len(reference):
            chamfers.append(robust_chamfer(model.deformed_positions(t), reference[i].vertices, np.inf) * 1e3)
    chamfer = float(np.mean(chamfers)) if chamfers else float("nan")

    rows, grid = [], []
    for view, frames in dataset.split(split).items():
        scores, similarity, shown = [], [], []
        pick = set(np.linspace(0, len(frames) - 1, min(GRID_COLUMNS, len(frames))).round().astype(int).tolist())
        for k, frame in enumerate(frames):
            output = model.render(frame.camera, frame.timestamp, background=config.render.background,
                                  rows_per_block=config.render.rows_per_block, workers=workers)
            scores.append(psnr(output.rgb, frame.rgb))
            similarity.append(ssim(output.rgb, frame.rgb))
            if k in pick:
                shown.append((frame.rgb, output.rgb))
        rows.append({"view": view, "frames": len(frames), "psnr": float(np.mean(scores)),
                     "ssim": float(np.mean(similarity)), "chamfer_x1e3": chamfer,
                     "gaussians": model.tree.gaussian_count()})
        grid.append([gt for gt, _ in shown])
        grid.append([rendered for _, rendered in shown])
        logger.info("%s: psnr %.2f ssim %.4f chamfer %.3f (x1e-3)", view, rows[-1]["psnr"], rows[-1]["ssim"], chamfer)
    return rows, _image_grid(grid)


def eval_cmd(checkpoint: PathLike, dataset: FrameDataset, split: str, out_dir: PathLike,
             workers: int = 1) -> list[dict]:
    model, config, _ = load_stage2(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, grid = evaluate(model, dataset, split, config, workers)
    write_csv(out_dir / "metrics.csv", rows, METRIC_COLUMNS)
    write_png(out_dir / f"grid_{split}.png", grid)
    return rows


def ablation_config(config: TrainConfig, flag: str) -> TrainConfig:
    if flag not in ABLATION_FLAGS:
        raise ConfigError(f"unknown ablation flag {flag!r}; choose from {', '.join(ABLATION_FLAGS)}")
    data = config.model_dump()
    if flag == "offset":
        data["ablation"]["offset_constraint"] = False
    elif flag == "scale":
        data["ablation"]["scale_constraint"] = False
    else:
        data["population"]["pruning"] = False
    return TrainConfig.model_validate(data)


def run_ablation(dataset: FrameDataset, flag: str, config: TrainConfig, run_dir: PathLike,
                 workers: int = 1) -> list[dict]:
    """Baseline and flagged stage-two runs from one shared stage-one fit, same seed."""
    run_dir = _run_dirs(run_dir)
    variant = ablation_config(config, flag)
    stage1 = run_stage1(dataset, config, run_dir / "stage1")
    results = []
    for name, cfg in (("baseline", config), (f"no_{flag}", variant)):
        checkpoint = run_stage2(dataset, stage1, cfg, run_dir / name, workers)
        model, _, _ = load_stage2(checkpoint)
        train_rows, _ = evaluate(model, dataset, "train", cfg, workers)
        row = {"variant": name, "train_psnr": train_rows[0]["psnr"], "chamfer_x1e3": train_rows[0]["chamfer_x1e3"],
               "gaussians": model.tree.gaussian_count()}
        if dataset.test_frames:
            test_rows, _ = evaluate(model, dataset, "test", cfg, workers)
            row["test_psnr"] = float(np.mean([r["psnr"] for r in test_rows]))
        results.append(row)
    write_csv(run_dir / "ablation.csv", results,
              ["variant", "train_psnr", "test_psnr", "chamfer_x1e3", "gaussians"])
    return results


def stage1_chamfers(checkpoint: PathLike, meshes: Sequence[Mesh]) -> np.ndarray:
    """Untruncated Chamfer of every fitted frame against ``meshes``."""
    canonical, deformation, _ = load_stage1(checkpoint)
    times = frame_times(len(meshes))
    return np.array([robust_chamfer(deformation.deform(canonical, t), m.vertices, np.inf)
                     for t, m in zip(times, meshes)])

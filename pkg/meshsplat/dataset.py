"""Synthetic dynamic scenes and the on-disk frame dataset.

Ground truth is produced by a plain ray/triangle rasterizer over the
analytically deformed mesh, independent of the surfel renderer. The mesh
sequence handed to training is a degraded copy of the true geometry.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import DatasetError
from .files import read_float_map, read_obj, read_png, write_float_map, write_obj, write_png
from .mesh import Mesh, compute_vertex_normals
from .renderer import NEAR, Camera

logger = logging.getLogger(__name__)

SCENARIOS = ("bending-bar", "swinging-sphere-pair", "twisting-torus")
CAMERA_MODES = ("orbit", "static")
TEST_OFFSETS = {"test_neg45": -np.pi / 4.0, "test_pos45": np.pi / 4.0}
DEFAULT_AMPLITUDE = {"bending-bar": 0.8, "swinging-sphere-pair": 0.5, "twisting-torus": 0.8}
FIELD_OF_VIEW = np.deg2rad(40.0)
CAMERA_DISTANCE = 3.5
CAMERA_ELEVATION = 0.3


# primitives

def icosahedron(radius: float = 1.0) -> Mesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(radius * v / np.linalg.norm(v, axis=1, keepdims=True), f)


def icosphere(subdivisions: int = 1, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    mesh = icosahedron()
    vertices, faces = [list(v) for v in mesh.vertices], mesh.faces.tolist()
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = 0.5 * (np.asarray(vertices[i]) + np.asarray(vertices[j]))
                vertices.append(list(m / np.linalg.norm(m)))
                midpoint[key] = len(vertices) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(radius * np.asarray(vertices) + np.asarray(center), np.asarray(faces))


def _merge_vertices(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, first, inverse = np.unique(np.round(vertices, 9), axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return vertices[first[order]], rank[inverse.reshape(-1)][faces]


def box_mesh(lo, hi, counts) -> Mesh:
    """Closed axis-aligned box surface, gridded ``counts`` cells per axis, outward winding."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    # (fixed axis, side, in-plane axis 1, in-plane axis 2) with axis1 x axis2 pointing outward
    sides = [(0, 1, 1, 2), (0, 0, 2, 1), (1, 1, 2, 0), (1, 0, 0, 2), (2, 1, 0, 1), (2, 0, 1, 0)]
    vertices, faces = [], []
    for fixed, side, p, q in sides:
        n_p, n_q = counts[p], counts[q]
        s, t = np.meshgrid(np.linspace(0, 1, n_p + 1), np.linspace(0, 1, n_q + 1), indexing="ij")
        pts = np.zeros((n_p + 1, n_q + 1, 3))
        pts[..., fixed] = hi[fixed] if side else lo[fixed]
        pts[..., p] = lo[p] + s * (hi[p] - lo[p])
        pts[..., q] = lo[q] + t * (hi[q] - lo[q])
        base = sum(len(v) for v in vertices)
        idx = base + np.arange((n_p + 1) * (n_q + 1)).reshape(n_p + 1, n_q + 1)
        v00, v10, v01, v11 = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
        faces.append(np.stack([v00, v10, v11], axis=-1).reshape(-1, 3))
        faces.append(np.stack([v00, v11, v01], axis=-1).reshape(-1, 3))
        vertices.append(pts.reshape(-1, 3))
    merged_v, merged_f = _merge_vertices(np.concatenate(vertices), np.concatenate(faces))
    return Mesh(merged_v, merged_f)


def torus_mesh(major: float = 0.7, minor: float = 0.25, n_major: int = 20, n_minor: int = 8) -> Mesh:
    a, b = np.meshgrid(np.arange(n_major) * 2 * np.pi / n_major, np.arange(n_minor) * 2 * np.pi / n_minor,
                       indexing="ij")
    ring = major + minor * np.cos(b)
    vertices = np.stack([ring * np.cos(a), ring * np.sin(a), minor * np.sin(b)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    v00 = i * n_minor + j
    v10 = ((i + 1) % n_major) * n_minor + j
    v01 = i * n_minor + (j + 1) % n_minor
    v11 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    faces = np.concatenate([np.stack([v00, v10, v11], -1).reshape(-1, 3), np.stack([v00, v11, v01], -1).reshape(-1, 3)])
    return Mesh(vertices, faces)


def procedural_colors(vertices: np.ndarray) -> np.ndarray:
    phase = np.array([0.0, 2.0, 4.0])
    return np.clip(0.5 + 0.4 * np.sin(4.0 * vertices + phase), 0.0, 1.0)


# scenarios

def _rotate(points: np.ndarray, axis: int, angle) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    a, b = [k for k in range(3) if k != axis]
    out = np.array(points, dtype=np.float64)
    out[..., a] = c * points[..., a] - s * points[..., b]
    out[..., b] = s * points[..., a] + c * points[..., b]
    return out


def bend(vertices: np.ndarray, t: float, amplitude: float) -> np.ndarray:
    """Bend the x axis into an arc of curvature amplitude * sin(pi t) about a centre above the bar."""
    kappa = amplitude * np.sin(np.pi * t)
    if abs(kappa) < 1e-9:
        return np.array(vertices, dtype=np.float64)
    radius = 1.0 / kappa
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    theta = x * kappa
    return np.stack([(radius - z) * np.sin(theta), y, radius - (radius - z) * np.cos(theta)], axis=1)


def swing(vertices: np.ndarray, t: float, amplitude: float) -> np.ndarray:
    """Each sphere swings like a pendulum hung above it, in opposite phase."""
    out = np.array(vertices, dtype=np.float64)
    for sign in (-1.0, 1.0):
        sel = np.sign(vertices[:, 0]) == sign
        pivot = np.array([0.6 * sign, 0.0, 1.0])
        angle = sign * amplitude * np.sin(2.0 * np.pi * t)
        out[sel] = _rotate(vertices[sel] - pivot, 1, angle) + pivot
    return out


def twist(vertices: np.ndarray, t: float, amplitude: float) -> np.ndarray:
    angle = amplitude * np.sin(np.pi * t) * vertices[:, 0]
    return _rotate(vertices, 0, angle)


@dataclass(frozen=True)
class Scenario:
    name: str
    build: Callable[[], Mesh]
    deform: Callable[[np.ndarray, float, float], np.ndarray]


def _bar() -> Mesh:
    return box_mesh((-1.0, -0.2, -0.2), (1.0, 0.2, 0.2), (12, 3, 3))


def _sphere_pair() -> Mesh:
    left = icosphere(1, 0.3, (-0.6, 0.0, 0.0))
    right = icosphere(1, 0.3, (0.6, 0.0, 0.0))
    return Mesh(np.vstack([left.vertices, right.vertices]), np.vstack([left.faces, right.faces + left.n_vertices]))


SCENARIO_TABLE = {
    "bending-bar": Scenario("bending-bar", _bar, bend),
    "swinging-sphere-pair": Scenario("swinging-sphere-pair", _sphere_pair, swing),
    "twisting-torus": Scenario("twisting-torus", torus_mesh, twist),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIO_TABLE[name]
    except KeyError:
        raise DatasetError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")


# ground-truth rasterizer

@dataclass
class MeshRender:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    flow: np.ndarray


def render_mesh(mesh: Mesh, camera: Camera, previous_vertices: Optional[np.ndarray] = None,
                background=(1.0, 1.0, 1.0), chunk: int = 64) -> MeshRender:
    """Nearest ray/triangle hit per pixel with barycentric colour and normal interpolation.

    Flow is the displacement, seen by this camera, of the hit surface point
    since ``previous_vertices``.
    """
    h, w = camera.height, camera.width
    origin = camera.origin
    dirs = camera.ray_directions()
    n_pix = len(dirs)
    best_t = np.full(n_pix, np.inf)
    best_face = -np.ones(n_pix, dtype=np.int64)
    best_u = np.zeros(n_pix)
    best_v = np.zeros(n_pix)
    V, F = mesh.vertices, mesh.faces
    for start in range(0, len(F), chunk):
        faces = F[start:start + chunk]
        v0, v1, v2 = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(dirs[:, None, :], e2[None, :, :])
        det = np.sum(e1[None] * pvec, axis=-1)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        u = np.sum(tvec[None] * pvec, axis=-1) * inv
        qvec = np.cross(tvec, e1)
        v = np.sum(dirs[:, None, :] * qvec[None], axis=-1) * inv
        t = np.sum(e2 * qvec, axis=-1)[None] * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > NEAR)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n_pix), k]
        closer = tk < best_t
        best_t[closer] = tk[closer]
        best_face[closer] = start + k[closer]
        best_u[closer] = u[closer, k[closer]]
        best_v[closer] = v[closer, k[closer]]

    rgb = np.tile(np.asarray(background, dtype=np.float64), (n_pix, 1))
    normal = np.zeros((n_pix, 3))
    flow = np.zeros((n_pix, 2))
    depth = np.zeros(n_pix)
    mask = best_face >= 0
    if mask.any():
        f = F[best_face[mask]]
        bary = np.stack([1.0 - best_u[mask] - best_v[mask], best_u[mask], best_v[mask]], axis=1)
        if mesh.vertex_colors is not None:
            rgb[mask] = np.einsum("pk,pkc->pc", bary, mesh.vertex_colors[f])
        vn = compute_vertex_normals(mesh)
        nrm = np.einsum("pk,pkc->pc", bary, vn[f])
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        normal[mask] = nrm @ camera.rotation.T
        depth[mask] = best_t[mask]
        if previous_vertices is not None:
            now = np.einsum("pk,pkc->pc", bary, V[f])
            before = np.einsum("pk,pkc->pc", bary, np.asarray(previous_vertices)[f])
            uv_now, _ = camera.project(now)
            uv_before, z_before = camera.project(before)
            flow[mask] = np.where((z_before > NEAR)[:, None], uv_now - uv_before, 0.0)
    return MeshRender(rgb.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w),
                      normal.reshape(h, w, 3), flow.reshape(h, w, 2))


def degrade_mesh(mesh: Mesh, rng: np.random.Generator, noise: float = 0.01, delete: float = 0.05,
                 floaters: float = 0.02) -> Mesh:
    """Vertex jitter, dropped faces and far-off floater vertices, all relative to the bbox diagonal."""
    diag = mesh.bbox_diagonal()
    vertices = mesh.vertices + rng.normal(0.0, noise * diag, size=mesh.vertices.shape)
    n_float = int(round(floaters * mesh.n_vertices))
    if n_float:
        chosen = rng.choice(mesh.n_vertices, n_float, replace=False)
        direction = rng.normal(size=(n_float, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        vertices[chosen] += 0.3 * diag * direction
    keep = rng.random(mesh.n_faces) >= delete
    return Mesh(vertices, mesh.faces[keep], mesh.vertex_colors)


# cameras

def intrinsics(resolution: int) -> tuple[float, float]:
    focal = 0.5 * resolution / np.tan(FIELD_OF_VIEW / 2.0)
    return focal, focal


def orbit_camera(azimuth: float, resolution: int) -> Camera:
    angle = azimuth - np.pi / 2.0
    eye = CAMERA_DISTANCE * np.array([
        np.cos(CAMERA_ELEVATION) * np.cos(angle), np.cos(CAMERA_ELEVATION) * np.sin(angle), np.sin(CAMERA_ELEVATION),
    ])
    fx, fy = intrinsics(resolution)
    return Camera.look_at(eye, np.zeros(3), (0.0, 0.0, 1.0), fx, fy, resolution, resolution)


def frame_azimuths(n_frames: int, camera_mode: str) -> np.ndarray:
    if camera_mode not in CAMERA_MODES:
        raise DatasetError(f"unknown camera mode {camera_mode!r}")
    if camera_mode == "static" or n_frames <= 1:
        return np.zeros(n_frames)
    return 2.0 * np.pi * np.arange(n_frames) / (n_frames - 1)


# dataset

@dataclass
class Frame:
    index: int
    timestamp: float
    camera: Camera
    rgb: np.ndarray
    mask: Optional[np.ndarray] = None
    flow: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None


@dataclass
class FrameDataset:
    scenario: str
    camera_mode: str
    frames: list[Frame]
    prior_meshes: list[Mesh] = field(default_factory=list)
    gt_meshes: list[Mesh] = field(default_factory=list)
    test_frames: dict[str, list[Frame]] = field(default_factory=dict)
    canonical_index: int = 0
    prior_registered: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def mesh_sequence(self) -> list[Mesh]:
        return self.prior_meshes

    def split(self, name: str) -> dict[str, list[Frame]]:
        if name == "train":
            return {"train": self.frames}
        if name == "test":
            if not self.test_frames:
                raise DatasetError("dataset has no test cameras")
            return dict(self.test_frames)
        raise DatasetError(f"unknown split {name!r}")

    def validate(self) -> None:
        if not self.frames:
            raise DatasetError("dataset has no frames")
        times = self.timestamps
        if np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > 1:
            raise DatasetError("timestamps must be strictly increasing within [0, 1]")
        shapes = {f.rgb.shape for f in self.frames}
        if len(shapes) != 1:
            raise DatasetError(f"frames have mixed image sizes {sorted(shapes)}")


def synth_dataset(
    scenario: str,
    frames: int = 60,
    resolution: int = 64,
    camera_mode: str = "orbit",
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    amplitude: Optional[float] = None,
    degrade: bool = True,
) -> FrameDataset:
    recipe = get_scenario(scenario)
    if frames < 1:
        raise DatasetError("need at least one frame")
    amplitude = DEFAULT_AMPLITUDE[scenario] if amplitude is None else amplitude
    rng = np.random.default_rng(seed)
    base = recipe.build()
    canonical = Mesh(base.vertices, base.faces, procedural_colors(base.vertices))
    times = np.arange(frames) / (frames - 1) if frames > 1 else np.zeros(1)
    azimuths = frame_azimuths(frames, camera_mode)

    dataset = FrameDataset(scenario=scenario, camera_mode=camera_mode, frames=[])
    previous = None
    for i, (t, az) in enumerate(zip(times, azimuths)):
        gt = canonical.with_vertices(recipe.deform(canonical.vertices, float(t), amplitude))
        dataset.gt_meshes.append(gt)
        dataset.prior_meshes.append(degrade_mesh(gt, rng) if degrade else gt)
        camera = orbit_camera(az, resolution)
        shot = render_mesh(gt, camera, previous, dataset.background)
        dataset.frames.append(Frame(i, float(t), camera, shot.rgb, shot.mask, shot.flow, shot.normal))
        for name, delta in TEST_OFFSETS.items():
            test_cam = orbit_camera(az + delta, resolution)
            test_shot = render_mesh(gt, test_cam, previous, dataset.background)
            dataset.test_frames.setdefault(name, []).append(
                Frame(i, float(t), test_cam, test_shot.rgb, test_shot.mask, test_shot.flow, test_shot.normal)
            )
        previous = gt.vertices
    logger.info("synthesized %s: %d frames at %dx%d, %s camera", scenario, frames, resolution, resolution,
                camera_mode)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset


def _frame_record(frame: Frame, tag: str, root: Path) -> dict:
    name = f"{tag}_{frame.index:04d}"
    record = {"index": frame.index, "timestamp": frame.timestamp, "camera": frame.camera.to_dict(),
              "rgb": f"images/{name}.png"}
    write_png(root / record["rgb"], frame.rgb)
    if frame.mask is not None:
        record["mask"] = f"masks/{name}.png"
        write_png(root / record["mask"], frame.mask.astype(np.float64))
    if frame.flow is not None:
        record["flow"] = f"flow/{name}.fmap"
        write_float_map(root / record["flow"], frame.flow)
    if frame.normal is not None:
        record["normal"] = f"normals/{name}.fmap"
        write_float_map(root / record["normal"], frame.normal)
    return record


def save_dataset(dataset: FrameDataset, root: Union[str, Path]) -> Path:
    root = Path(root)
    for sub in ("images", "masks", "flow", "normals", "meshes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {
        "scenario": dataset.scenario,
        "camera_mode": dataset.camera_mode,
        "canonical_index": dataset.canonical_index,
        "prior_registered": dataset.prior_registered,
        "background": list(dataset.background),
        "frames": [_frame_record(f, "train", root) for f in dataset.frames],
        "test": {name: [_frame_record(f, name, root) for f in frames] for name, frames in dataset.test_frames.items()},
        "prior_meshes": [],
        "gt_meshes": [],
    }
    for kind, meshes in (("prior", dataset.prior_meshes), ("gt", dataset.gt_meshes)):
        for i, mesh in enumerate(meshes):
            rel = f"meshes/{kind}_{i:04d}.obj"
            write_obj(root / rel, mesh)
            manifest[f"{kind}_meshes"].append(rel)
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return root


def _load_frame(record: dict, root: Path) -> Frame:
    mask = read_png(root / record["mask"]) > 0.5 if "mask" in record else None
    return Frame(
        index=int(record["index"]),
        timestamp=float(record["timestamp"]),
        camera=Camera.from_dict(record["camera"]),
        rgb=read_png(root / record["rgb"])[..., :3],
        mask=mask,
        flow=read_float_map(root / record["flow"]) if "flow" in record else None,
        normal=read_float_map(root / record["normal"]) if "normal" in record else None,
    )


def load_dataset(root: Union[str, Path]) -> FrameDataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "dataset.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"no dataset.json under {root}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"dataset.json under {root} is not valid JSON: {e}")
    dataset = FrameDataset(
        scenario=manifest.get("scenario", "custom"),
        camera_mode=manifest.get("camera_mode", "orbit"),
        frames=[_load_frame(r, root) for r in manifest["frames"]],
        prior_meshes=[read_obj(root / p) for p in manifest.get("prior_meshes", [])],
        gt_meshes=[read_obj(root / p) for p in manifest.get("gt_meshes", [])],
        test_frames={name: [_load_frame(r, root) for r in records]
                     for name, records in manifest.get("test", {}).items()},
        canonical_index=int(manifest.get("canonical_index", 0)),
        prior_registered=bool(manifest.get("prior_registered", False)),
        background=tuple(manifest.get("background", (1.0, 1.0, 1.0))),
    )
    dataset.validate()
    return dataset

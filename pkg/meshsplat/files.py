from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
from PIL import Image

from .errors import CheckpointError, DatasetError
from .mesh import Mesh

PathLike = Union[str, Path]

FLOAT_MAP_MAGIC = 0x4D53464D
_HEADER = struct.Struct("<4I")
_META_KEY = "__meta__"


def write_png(path: PathLike, image: np.ndarray) -> None:
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8)).save(path)


def read_png(path: PathLike) -> np.ndarray:
    """Float image in [0, 1]; grayscale stays 2-D, RGBA keeps its alpha."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB", "RGBA"):
                img = img.convert("RGB")
            return np.asarray(img, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DatasetError(f"image not found: {path}")


def write_float_map(path: PathLike, array: np.ndarray) -> None:
    """Planar little-endian float32 after a 16-byte header (magic, width, height, channels)."""
    data = np.asarray(array, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    height, width, channels = data.shape
    planar = np.ascontiguousarray(np.moveaxis(data, -1, 0)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FLOAT_MAP_MAGIC, width, height, channels))
        fh.write(planar.tobytes())


def read_float_map(path: PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"float map not found: {path}")
    if len(raw) < _HEADER.size:
        raise DatasetError(f"float map {path} is truncated")
    magic, width, height, channels = _HEADER.unpack_from(raw)
    if magic != FLOAT_MAP_MAGIC:
        raise DatasetError(f"{path} is not a float map (magic {magic:#x})")
    expected = width * height * channels * 4
    if len(raw) - _HEADER.size != expected:
        raise DatasetError(f"float map {path} holds {len(raw) - _HEADER.size} bytes, expected {expected}")
    planar = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(channels, height, width)
    return np.moveaxis(planar, 0, -1).astype(np.float64)


def write_obj(path: PathLike, mesh: Mesh) -> None:
    lines = []
    colors = mesh.vertex_colors
    for i, v in enumerate(mesh.vertices):
        if colors is None:
            lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        else:
            c = colors[i]
            lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g}")
    for f in mesh.faces + 1:
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: PathLike) -> Mesh:
    """Triangle OBJ reader; accepts ``a``, ``a/b/c`` and ``a//c`` face corners, 1-based."""
    vertices, colors, faces = [], [], []
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DatasetError(f"mesh not found: {path}")
    for number, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                corners = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(corners) - 1):
                    faces.append([corners[0], corners[k], corners[k + 1]])
        except ValueError:
            raise DatasetError(f"{path}:{number}: cannot parse {line!r}")
    vertex_colors = np.array(colors) if colors and len(colors) == len(vertices) else None
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3), vertex_colors)


def save_checkpoint(path: PathLike, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except (OSError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} is unreadable: {e}")
    meta = json.loads(str(arrays.pop(_META_KEY, np.array("{}"))))
    return arrays, meta


def subtree(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {name[len(head):]: value for name, value in arrays.items() if name.startswith(head)}


def prefixed(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": value for name, value in arrays.items()}


def write_csv(path: PathLike, rows: Iterable[Mapping[str, object]], columns: Optional[list[str]] = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def read_csv(path: PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

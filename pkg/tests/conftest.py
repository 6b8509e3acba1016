import numpy as np
import pytest

from meshsplat.config import TrainConfig
from meshsplat.dataset import box_mesh, icosahedron, procedural_colors, synth_dataset
from meshsplat.mesh import Mesh


def grid_mesh(n: int = 4, size: float = 1.0) -> Mesh:
    """Flat n x n grid in the z = 0 plane, with a boundary."""
    xs = np.linspace(0.0, size, n + 1)
    x, y = np.meshgrid(xs, xs, indexing="ij")
    vertices = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    faces = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return Mesh(vertices, faces)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ico():
    mesh = icosahedron()
    return Mesh(mesh.vertices, mesh.faces, procedural_colors(mesh.vertices))


@pytest.fixture
def cube():
    return box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), (1, 1, 1))


@pytest.fixture
def grid():
    return grid_mesh()


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig.model_validate({
        "feature_dim": 8,
        "decoder_hidden": 16,
        "pose_dim": 4,
        "stage1": {"steps": 20},
        "stage2": {"steps": 6},
        "preprocess": {"initial_faces": 120, "taubin_iterations": 2},
        "population": {"cadence": 2, "warmup": 2},
        "render": {"snapshot_every": 3, "log_every": 5, "rows_per_block": 4},
    })


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("data")


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return synth_dataset("bending-bar", frames=3, resolution=16, camera_mode="orbit", seed=0,
                         out_dir=tiny_dataset_dir)

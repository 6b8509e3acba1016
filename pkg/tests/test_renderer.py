import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from meshsplat.decoders import SurfelSet
from meshsplat.errors import RenderError
from meshsplat.renderer import Camera, cutoff_guard_mask, rasterize, rasterize_backward


def _surfels(rng, n=6):
    center = np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(2.0, 3.0, n)])
    normal = np.column_stack([rng.normal(0.0, 0.1, n), rng.normal(0.0, 0.1, n), -np.ones(n)])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normal, u)
    return SurfelSet(
        center=center, tangent_u=u, tangent_v=v, scale=rng.uniform(0.15, 0.3, (n, 2)), normal=normal,
        opacity=rng.uniform(0.3, 0.9, n), color=rng.uniform(size=(n, 3)),
        flow_anchor=center + rng.normal(0.0, 0.02, (n, 3)),
    )


@pytest.fixture
def camera():
    return Camera(fx=16.0, fy=16.0, cx=6.0, cy=6.0, width=12, height=12)


def _composite_by_hand(surfels, camera, background):
    origin = camera.origin
    now, _ = camera.project(surfels.center)
    before, _ = camera.project(surfels.flow_anchor)
    flow = now - before
    image = np.zeros((camera.height * camera.width, 10))
    for p, d in enumerate(camera.ray_directions()):
        hits = []
        for k in range(len(surfels)):
            n = surfels.normal[k]
            dn = np.sum(d * n)
            if abs(dn) < 1e-8:
                continue
            tau = np.sum((surfels.center[k] - origin) * n) / dn
            offset = origin + tau * d - surfels.center[k]
            a = np.sum(offset * surfels.tangent_u[k])
            b = np.sum(offset * surfels.tangent_v[k])
            q = a * a / surfels.scale[k, 0] ** 2 + b * b / surfels.scale[k, 1] ** 2
            if tau >= 0.01 and q <= 9.0:
                hits.append((tau, k, surfels.opacity[k] * np.exp(-0.5 * q)))
        transmittance = 1.0
        for tau, k, alpha in sorted(hits):
            payload = np.concatenate([surfels.color[k], [tau], camera.rotation @ surfels.normal[k], flow[k], [1.0]])
            image[p] += transmittance * alpha * payload
            transmittance *= 1.0 - alpha
        image[p, :3] += transmittance * np.asarray(background)
    return image.reshape(camera.height, camera.width, 10)


def test_matches_per_pixel_compositing(rng, camera):
    surfels = _surfels(rng)
    background = (0.2, 0.4, 0.6)
    out = rasterize(surfels, camera, background=background, rows_per_block=5)
    expected = _composite_by_hand(surfels, camera, background)
    assert np.allclose(out.rgb, expected[..., 0:3], atol=1e-12)
    assert np.allclose(out.depth, expected[..., 3], atol=1e-12)
    assert np.allclose(out.normal, expected[..., 4:7], atol=1e-12)
    assert np.allclose(out.flow, expected[..., 7:9], atol=1e-12)
    assert np.allclose(out.alpha, expected[..., 9], atol=1e-12)
    assert out.alpha.max() > 0.3


def test_kernel_value_one_sigma_out(camera):
    fx = camera.fx
    hit = np.array([2.0 * 0.5 / fx, 2.0 * 0.5 / fx, 2.0])
    surfels = SurfelSet(
        center=(hit - [0.1, 0.0, 0.0])[None], tangent_u=np.array([[1.0, 0.0, 0.0]]),
        tangent_v=np.array([[0.0, 1.0, 0.0]]), scale=np.array([[0.1, 0.1]]),
        normal=np.array([[0.0, 0.0, -1.0]]), opacity=np.array([1.0]), color=np.zeros((1, 3)),
    )
    out = rasterize(surfels, camera)
    assert out.alpha[6, 6] == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert out.depth[6, 6] == pytest.approx(2.0 * np.exp(-0.5), abs=1e-12)
    assert out.alpha[0, 0] == 0.0
    assert np.allclose(out.rgb[0, 0], 1.0)


def test_empty_scene_shows_background(camera):
    empty = SurfelSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                      np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    out = rasterize(empty, camera, background=(0.0, 0.5, 1.0))
    assert np.all(out.alpha == 0.0)
    assert np.allclose(out.rgb, [0.0, 0.5, 1.0])


def test_workers_and_blocks_do_not_change_pixels(rng, camera):
    surfels = _surfels(rng, 10)
    serial = rasterize(surfels, camera, rows_per_block=4, workers=1)
    threaded = rasterize(surfels, camera, rows_per_block=4, workers=3)
    assert np.array_equal(serial.rgb, threaded.rgb)
    assert np.array_equal(serial.alpha, threaded.alpha)
    single_block = rasterize(surfels, camera, rows_per_block=64)
    assert np.allclose(serial.rgb, single_block.rgb, atol=1e-14)


def test_surfel_order_does_not_matter(rng, camera):
    surfels = _surfels(rng, 20)
    out = rasterize(surfels, camera, background=(0.1, 0.2, 0.3))
    shuffled = rasterize(surfels.subset(rng.permutation(20)), camera, background=(0.1, 0.2, 0.3))
    for name in ("rgb", "alpha", "depth", "normal", "flow"):
        assert np.array_equal(getattr(out, name), getattr(shuffled, name)), name


def test_background_enters_linearly(rng, camera):
    surfels = _surfels(rng, 12)
    black = rasterize(surfels, camera, background=(0.0, 0.0, 0.0))
    white = rasterize(surfels, camera, background=(1.0, 1.0, 1.0))
    assert np.allclose(white.rgb - black.rgb, (1.0 - black.alpha)[..., None], atol=1e-12)
    background = np.array([0.7, 0.1, 0.4])
    tinted = rasterize(surfels, camera, background=background)
    assert np.allclose(tinted.rgb, black.rgb + (1.0 - black.alpha)[..., None] * background, atol=1e-12)


def test_moving_scene_and_camera_together_changes_nothing(rng, camera):
    surfels = _surfels(rng, 12)
    rotation = Rotation.from_rotvec([0.4, -0.7, 0.25]).as_matrix()
    shift = np.array([1.5, -0.3, 2.0])
    moved = SurfelSet(
        center=surfels.center @ rotation.T + shift, tangent_u=surfels.tangent_u @ rotation.T,
        tangent_v=surfels.tangent_v @ rotation.T, scale=surfels.scale, normal=surfels.normal @ rotation.T,
        opacity=surfels.opacity, color=surfels.color, flow_anchor=surfels.flow_anchor @ rotation.T + shift,
    )
    follower = Camera(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
                      camera.rotation @ rotation.T, camera.translation - camera.rotation @ rotation.T @ shift)
    out = rasterize(surfels, camera)
    again = rasterize(moved, follower)
    for name in ("rgb", "alpha", "depth", "normal", "flow"):
        assert np.allclose(getattr(out, name), getattr(again, name), atol=1e-10), name
    assert out.alpha.max() > 0.3


def test_non_finite_surfel_raises(rng, camera):
    surfels = _surfels(rng)
    surfels.center[2, 1] = np.nan
    with pytest.raises(RenderError, match="surfel 2"):
        rasterize(surfels, camera)


def test_camera_validation_and_round_trip():
    with pytest.raises(RenderError):
        Camera(fx=0.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(RenderError):
        Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4, rotation=np.diag([1.0, 1.0, -1.0]))
    camera = Camera.look_at([3.0, 0.0, 0.5], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 20.0, 20.0, 16, 12)
    assert np.allclose(camera.origin, [3.0, 0.0, 0.5])
    uv, z = camera.project(np.zeros(3))
    assert np.allclose(uv, [8.0, 6.0])
    assert z > 0
    again = Camera.from_dict(camera.to_dict())
    assert np.array_equal(again.rotation, camera.rotation)
    assert np.array_equal(again.translation, camera.translation)
    with pytest.raises(RenderError):
        Camera.from_dict({"fx": 1.0})


def test_look_at_rejects_parallel_up():
    with pytest.raises(RenderError):
        Camera.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 10.0, 10.0, 8, 8)


def test_backward_matches_differences(rng, camera):
    surfels = _surfels(rng)
    out = rasterize(surfels, camera, background=(0.3, 0.3, 0.3), rows_per_block=5)
    shape = (camera.height, camera.width)
    w_rgb, w_alpha, w_depth = rng.normal(size=shape + (3,)), rng.normal(size=shape), rng.normal(size=shape)
    w_normal, w_flow = rng.normal(size=shape + (3,)), rng.normal(size=shape + (2,))

    def loss():
        o = rasterize(surfels, camera, background=(0.3, 0.3, 0.3), rows_per_block=5)
        return float(np.sum(w_rgb * o.rgb) + np.sum(w_alpha * o.alpha) + np.sum(w_depth * o.depth)
                     + np.sum(w_normal * o.normal) + np.sum(w_flow * o.flow))

    grads = rasterize_backward(out, w_rgb, w_alpha, w_depth, w_normal, w_flow, workers=2)
    guard = cutoff_guard_mask(out)
    assert guard.shape == shape
    h = 1e-6
    for name, index in [("center", (1, 0)), ("center", (3, 2)), ("tangent_u", (0, 1)), ("scale", (2, 0)),
                        ("normal", (4, 0)), ("opacity", (5,)), ("color", (1, 2))]:
        param = getattr(surfels, name)
        original = param[index]
        param[index] = original + h
        plus = loss()
        param[index] = original - h
        minus = loss()
        param[index] = original
        assert (plus - minus) / (2 * h) == pytest.approx(getattr(grads, name)[index], rel=1e-4, abs=1e-7)


def test_backward_needs_records(rng, camera):
    out = rasterize(_surfels(rng), camera)
    out.records = None
    with pytest.raises(RenderError):
        rasterize_backward(out, np.zeros((12, 12, 3)))

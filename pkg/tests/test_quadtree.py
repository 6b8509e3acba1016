import logging

import numpy as np
import pytest

from meshsplat.config import PopulationConfig
from meshsplat.errors import TreeError
from meshsplat.nn import logit
from meshsplat.quadtree import (
    GaussianQuadTree,
    child_opacity,
    gaussian_position,
    init_tree,
    interpolate_features,
    is_control_step,
    population_control,
)


@pytest.fixture
def tree(ico, rng):
    tree = init_tree(ico, feature_dim=4)
    tree.features[:] = rng.normal(size=tree.features.shape)
    return tree


def _randomize(tree, rng):
    tree.edge_features[:] = rng.normal(0.0, 0.2, size=tree.edge_features.shape)
    tree.ratio_logits[:] = rng.normal(0.0, 0.5, size=tree.ratio_logits.shape)
    for name in ("parent_r", "parent_c", "child_r", "child_c"):
        getattr(tree, name)[:] = rng.normal(0.0, 0.5, size=getattr(tree, name).shape)
    tree.opacity_logits[:] = rng.normal(0.0, 1.0, size=tree.opacity_logits.shape)


def _bary_area(corners):
    a, b, c = corners[:, :2]
    u, v = b - a, c - a
    return 0.5 * abs(u[0] * v[1] - u[1] * v[0])


def test_competitive_opacity_identity():
    alpha = np.linspace(0.0, 1.0, 1001)
    child = child_opacity(alpha)
    assert np.allclose(alpha**0.9 + child**0.9, 1.0, atol=1e-12)
    assert child[0] == 1.0
    assert child[-1] == 0.0
    assert child_opacity(0.5) == pytest.approx(0.4262, abs=1e-4)


def test_interpolate_features_matches_scalar_formula(rng):
    c = rng.normal(size=3)
    f = rng.normal(size=(3, 5))
    w = np.exp(c) / np.exp(c).sum()
    expected = w[0] * f[0] + w[1] * f[1] + w[2] * f[2]
    assert np.allclose(interpolate_features(c, f[0], f[1], f[2]), expected, atol=1e-12)
    assert np.allclose(interpolate_features(np.zeros(3), f[0], f[1], f[2]), f.mean(axis=0), atol=1e-12)


def test_gaussian_position_stays_inside(rng):
    corners = rng.normal(size=(3, 3))
    r = rng.normal(size=3)
    w = np.exp(r) / np.exp(r).sum()
    assert np.allclose(gaussian_position(r, corners), w @ corners, atol=1e-12)


def test_initial_tree_counts(tree):
    assert tree.n_faces == 20
    assert tree.gaussian_count() == 100
    batch = tree.gaussians()
    assert len(batch) == 100
    assert np.sum(batch.is_parent) == 20
    assert np.allclose(batch.opacity[batch.is_parent], 0.99)


def test_face_points_default_to_midpoints(tree):
    points, feats = tree.face_points(3)
    assert np.allclose(points[3], [0.5, 0.5, 0.0])
    corner_feats = tree.features[tree.corner_slot[3]]
    assert np.allclose(feats[5], 0.5 * (corner_feats[2] + corner_feats[0]))


def test_subdivide_adds_fifteen_gaussians(tree, rng):
    _randomize(tree, rng)
    before = [tree.child_vertex_features(2, k) for k in range(4)]
    expected_bary = [tree.child_corner_bary(2, k) for k in range(4)]
    assert tree.subdivide(2)
    assert tree.gaussian_count() == 115
    new = tree.subdivided_into[2]
    for k, face in enumerate(new):
        assert np.array_equal(tree.features[tree.corner_slot[face]], before[k])
        assert np.array_equal(tree.corner_bary[face], expected_bary[k])
        assert tree.depth[face] == 1
        assert tree.parent[face] == 2
    assert tree.audit()


def test_children_tile_the_parent(tree, rng):
    _randomize(tree, rng)
    tree.subdivide(0)
    areas = [_bary_area(tree.corner_bary[f]) for f in tree.subdivided_into[0]]
    assert sum(areas) == pytest.approx(_bary_area(np.eye(3)), abs=1e-12)


def test_new_parents_inherit_child_logits(tree, rng):
    _randomize(tree, rng)
    child_r = tree.child_r[5].copy()
    alpha = 1.0 / (1.0 + np.exp(-tree.opacity_logits[5]))
    tree.subdivide(5)
    new = tree.subdivided_into[5]
    assert np.array_equal(tree.parent_r[new], child_r)
    assert np.allclose(tree.parent_opacity()[new], child_opacity(alpha))
    assert np.all(tree.ratio_logits[new] == 0.0)


def test_subdivide_stops_at_max_depth(ico, caplog):
    tree = init_tree(ico, feature_dim=2, max_depth=1)
    assert tree.subdivide(0)
    child = int(tree.subdivided_into[0, 0])
    with caplog.at_level(logging.WARNING):
        assert not tree.subdivide(child)
    assert "max depth" in caplog.text
    assert tree.active[child]


def test_subdivide_inactive_face_raises(tree):
    tree.subdivide(0)
    with pytest.raises(TreeError):
        tree.subdivide(0)


def test_audit_catches_broken_links(tree):
    tree.subdivide(0)
    tree.parent[tree.subdivided_into[0, 1]] = 7
    with pytest.raises(TreeError):
        tree.audit()


def test_control_step_windows():
    config = PopulationConfig()
    assert not is_control_step(0, 40000, config)
    assert not is_control_step(4000, 40000, config)
    assert is_control_step(6000, 40000, config)
    assert not is_control_step(6001, 40000, config)
    assert not is_control_step(36000, 40000, config)


def test_population_control_outside_window_is_noop(tree):
    report = population_control(tree, 4000, PopulationConfig(), total_steps=40000)
    assert report is None
    assert tree.n_faces == 20


def test_population_control_replays_rules(tree):
    config = PopulationConfig(cadence=1, warmup=0)
    tree.opacity_logits[:] = logit(0.5)

    # event 1: one dim parent subdivides
    tree.opacity_logits[0] = logit(0.05)
    tree.record_opacity_stats(config.deactivate_above)
    report = population_control(tree, 1, config, total_steps=100)
    assert report.subdivided == [0] and report.deactivated == []
    assert tree.gaussian_count() == 115
    assert tree.tracked == 0

    # event 2: the bright new parents lose their children, a second parent subdivides
    first = tree.subdivided_into[0].copy()
    tree.opacity_logits[1] = logit(0.05)
    tree.record_opacity_stats(config.deactivate_above)
    report = population_control(tree, 2, config, total_steps=100)
    assert report.subdivided == [1]
    assert sorted(report.deactivated) == sorted(first.tolist())
    assert tree.gaussian_count() == 114

    # event 3: a parent with switched-off children never subdivides
    second = tree.subdivided_into[1].copy()
    tree.opacity_logits[first[0]] = logit(0.05)
    tree.record_opacity_stats(config.deactivate_above)
    report = population_control(tree, 3, config, total_steps=100)
    assert report.subdivided == []
    assert sorted(report.deactivated) == sorted(second.tolist())
    assert tree.gaussian_count() == 98
    assert len(tree.gaussians()) == 98
    assert tree.audit()


def test_population_control_without_pruning(tree):
    config = PopulationConfig(cadence=1, warmup=0, pruning=False)
    for _ in range(5):
        tree.record_opacity_stats(config.deactivate_above)
    report = population_control(tree, 1, config, total_steps=100)
    assert report.deactivated == []
    assert tree.gaussian_count() == 100


def test_backward_matches_differences(tree, rng):
    _randomize(tree, rng)
    tree.subdivide(4)
    tree.deactivated[7, 1] = True
    batch = tree.gaussians()
    w_bary = rng.normal(size=batch.bary.shape)
    w_feat = rng.normal(size=batch.features.shape)
    w_op = rng.normal(size=batch.opacity.shape)

    def loss():
        b = tree.gaussians()
        return float(np.sum(w_bary * b.bary) + np.sum(w_feat * b.features) + np.sum(w_op * b.opacity))

    grads = tree.backward(batch, w_bary, np.zeros_like(batch.corner_bary), w_feat,
                          np.zeros_like(batch.feature_weights), w_op)
    h = 1e-6
    for name, index in [("ratio_logits", (1, 2)), ("child_r", (3, 1, 0)), ("parent_c", (9, 2)),
                        ("edge_features", (6, 0, 3)), ("features", (2, 1)), ("opacity_logits", (11,))]:
        param = getattr(tree, name)
        original = param[index]
        param[index] = original + h
        plus = loss()
        param[index] = original - h
        minus = loss()
        param[index] = original
        assert (plus - minus) / (2 * h) == pytest.approx(grads[f"tree.{name}"][index], rel=1e-5, abs=1e-9)


def test_state_round_trip(tree, rng):
    _randomize(tree, rng)
    tree.subdivide(1)
    tree.deactivated[3] = True
    restored = GaussianQuadTree.from_state(tree.state_arrays())
    a, b = tree.gaussians(), restored.gaussians()
    assert np.array_equal(a.bary, b.bary)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.opacity, b.opacity)
    assert restored.gaussian_count() == tree.gaussian_count()

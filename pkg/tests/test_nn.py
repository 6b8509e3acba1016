import numpy as np
import pytest

from meshsplat.errors import ShapeError
from meshsplat.nn import Adam, LrSchedule, Mlp, PoseEncoder, encode, encode_backward, logit, sigmoid, softmax


def test_sigmoid_logit_inverse():
    for p in (1e-4, 0.1, 0.5, 0.99):
        assert sigmoid(logit(p)) == pytest.approx(p, rel=1e-12)


def test_softmax_is_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0], [1000.0, 1001.0, 1002.0]])
    out = softmax(x, axis=1)
    assert np.allclose(out[0], out[1])
    assert np.allclose(out.sum(axis=1), 1.0)


def test_mlp_backward_matches_differences(rng):
    mlp = Mlp([4, 6, 2], output_activation="tanh", output_scale=0.5, rng=rng)
    x = rng.normal(size=(3, 4))
    weights = rng.normal(size=(3, 2))
    out, cache = mlp.forward(x)
    grads, g_in = mlp.backward(cache, weights)
    h = 1e-6

    def loss():
        return float(np.sum(mlp(x) * weights))

    w = mlp.params[0]
    w[1, 2] += h
    plus = loss()
    w[1, 2] -= 2 * h
    minus = loss()
    w[1, 2] += h
    assert (plus - minus) / (2 * h) == pytest.approx(grads[0][1, 2], rel=1e-6)
    x_plus, x_minus = x.copy(), x.copy()
    x_plus[2, 3] += h
    x_minus[2, 3] -= h
    numeric = (np.sum(mlp(x_plus) * weights) - np.sum(mlp(x_minus) * weights)) / (2 * h)
    assert numeric == pytest.approx(g_in[2, 3], rel=1e-6)


def test_mlp_single_sample_keeps_shape(rng):
    mlp = Mlp([3, 5, 2], rng=rng)
    out, cache = mlp.forward(np.ones(3))
    assert out.shape == (2,)
    _, g_in = mlp.backward(cache, np.ones(2))
    assert g_in.shape == (3,)


def test_mlp_zero_last_outputs_zero(rng):
    mlp = Mlp([3, 4, 1], rng=rng, zero_last=True)
    assert np.all(mlp(rng.normal(size=(5, 3))) == 0.0)


def test_mlp_rejects_wrong_widths(rng):
    mlp = Mlp([3, 4, 1], rng=rng)
    with pytest.raises(ShapeError):
        mlp.forward(np.ones((2, 4)))
    _, cache = mlp.forward(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        mlp.backward(cache, np.ones((2, 2)))
    with pytest.raises(ShapeError):
        Mlp([3], rng=rng)


def test_mlp_named_parameters_share_storage(rng):
    mlp = Mlp([2, 3, 1], rng=rng)
    params = mlp.named_parameters("net")
    assert sorted(params) == ["net.0", "net.1", "net.2", "net.3"]
    params["net.1"][:] = 7.0
    assert np.all(mlp.params[1] == 7.0)


def test_encode_backward(rng):
    x = rng.normal(size=(2, 3))
    grad = rng.normal(size=(2, 3 * 5))
    analytic = encode_backward(x, 2, grad)
    h = 1e-6
    plus, minus = x.copy(), x.copy()
    plus[1, 0] += h
    minus[1, 0] -= h
    numeric = (np.sum(encode(plus, 2) * grad) - np.sum(encode(minus, 2) * grad)) / (2 * h)
    assert numeric == pytest.approx(analytic[1, 0], rel=1e-6)


def test_pose_encoder_shapes(rng):
    encoder = PoseEncoder(n_points=5, dim=4, rng=rng)
    positions = rng.normal(size=(5, 3))
    pose, cache = encoder.forward(positions)
    assert pose.shape == (4,)
    grads, g_positions = encoder.backward(cache, np.ones(4))
    assert g_positions.shape == (5, 3)
    assert len(grads) == 4


def test_lr_schedule_decays_to_end():
    schedule = LrSchedule(1e-3, 1e-5, 100)
    assert schedule.at(0) == pytest.approx(1e-3)
    assert schedule.at(50) == pytest.approx(1e-4)
    assert schedule.at(100) == pytest.approx(1e-5)
    assert schedule.at(500) == pytest.approx(1e-5)
    assert LrSchedule(1e-2).at(1000) == 1e-2


def test_adam_first_step_moves_by_lr():
    param = np.array([1.0, -1.0, 0.0])
    optimizer = Adam({"g": LrSchedule(0.1)})
    optimizer.step({"p": param}, {"p": np.array([2.0, -3.0, 0.0])}, {"p": "g"})
    assert np.allclose(param, [0.9, -0.9, 0.0], atol=1e-6)


def test_adam_follows_growing_parameter():
    param = np.ones((2, 3))
    optimizer = Adam({"g": LrSchedule(0.1)})
    optimizer.step({"p": param}, {"p": np.ones((2, 3))}, {"p": "g"})
    grown = np.vstack([param, np.ones((1, 3))])
    optimizer.step({"p": grown}, {"p": np.ones((3, 3))}, {"p": "g"})
    assert optimizer.m["p"].shape == (3, 3)
    with pytest.raises(ShapeError):
        optimizer.step({"p": np.ones((1, 3))}, {"p": np.ones((1, 3))}, {"p": "g"})

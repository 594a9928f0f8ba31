import numpy as np
import pytest

from gnnroute import nn_core
from gnnroute.nn_core import (
    CheckpointError,
    DenseLayerParams,
    OptimizerState,
    RecurrentCellParams,
    dense_apply,
    dense_backward,
    dense_forward,
    finite_diff_check,
    load_arrays,
    nesterov_step,
    recurrent_backward,
    recurrent_forward,
    recurrent_update,
    save_arrays,
)


def test_dense_identity():
    p = DenseLayerParams(np.eye(3), np.zeros(3))
    x = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(dense_apply(p, x), x)


def test_dense_bias_only():
    b = np.array([0.3, -1.0])
    p = DenseLayerParams(np.zeros((2, 4)), b)
    assert np.array_equal(dense_apply(p, np.ones(4)), b)


def test_dense_shape_mismatch():
    p = DenseLayerParams(np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        dense_apply(p, np.ones(3))
    with pytest.raises(ValueError):
        DenseLayerParams(np.zeros((2, 4)), np.zeros(3))


def test_selu_values():
    assert nn_core.selu(np.array([1.0]))[0] == pytest.approx(1.0507009873554805)
    assert nn_core.selu(np.array([-1.0]))[0] == pytest.approx(1.0507009873554805 * 1.6732632423543772 * (np.exp(-1) - 1))


@pytest.mark.parametrize("activation", ["linear", "selu"])
def test_dense_jacobian_matches_central_differences(activation):
    rng = np.random.default_rng(0)
    p = DenseLayerParams.init(rng, 5, 3, activation)
    p.bias[:] = rng.normal(size=3)
    x = rng.normal(size=5)
    h = 1e-5
    numeric = np.zeros((3, 5))
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        numeric[:, i] = (dense_apply(p, x + e) - dense_apply(p, x - e)) / (2 * h)
    _, cache = dense_forward(p, x)
    analytic = np.stack([dense_backward(p, cache, row)[0] for row in np.eye(3)])
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-5


def test_recurrent_zero_params_halves_hidden():
    H = 4
    p = RecurrentCellParams(np.zeros((3 * H, H)), np.zeros((3 * H, H)), np.zeros(3 * H))
    h = np.array([0.2, -0.4, 0.9, 0.0])
    assert np.allclose(recurrent_update(p, h, np.ones(H)), h / 2)


def test_recurrent_pure():
    rng = np.random.default_rng(1)
    p = RecurrentCellParams.init(rng, 6)
    h, x = rng.uniform(-1, 1, 6), rng.normal(size=6)
    assert np.array_equal(recurrent_update(p, h, x), recurrent_update(p, h, x))


def test_recurrent_output_bounded():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = RecurrentCellParams.init(rng, 5)
        p.b[:] = rng.normal(size=15)
        h = rng.uniform(-0.999, 0.999, size=(7, 5))
        out = recurrent_update(p, h, 10 * rng.normal(size=(7, 5)))
        assert np.all(np.abs(out) < 1)


def test_recurrent_shape_mismatch():
    p = RecurrentCellParams.init(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        recurrent_update(p, np.zeros(4), np.zeros(3))


def test_recurrent_gradients_central_differences():
    rng = np.random.default_rng(3)
    H = 4
    cell = RecurrentCellParams.init(rng, H)
    cell.b[:] = rng.normal(size=3 * H)
    h = rng.uniform(-1, 1, size=(2, H))
    x = rng.normal(size=(2, H))
    w_out = rng.normal(size=(2, H))

    def loss(a):
        c = RecurrentCellParams(a["w"], a["u"], a["b"])
        out, cache = recurrent_forward(c, a["h"], a["x"])
        dh, dx, dW, dU, db = recurrent_backward(c, cache, w_out)
        return float((out * w_out).sum()), {"w": dW, "u": dU, "b": db, "h": dh, "x": dx}

    rep = finite_diff_check(loss, {"w": cell.w, "u": cell.u, "b": cell.b, "h": h, "x": x}, tolerance=1e-5)
    assert rep.passed, rep.errors


def test_sgd_without_momentum():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.25])}
    out, _ = nesterov_step(OptimizerState(0.1, 0.0), params, grads)
    assert np.array_equal(out["w"], params["w"] - 0.1 * grads["w"])


def test_zero_gradient_keeps_params():
    params = {"w": np.array([3.0])}
    out, opt = nesterov_step(OptimizerState(), params, {"w": np.zeros(1)})
    assert np.array_equal(out["w"], params["w"])
    assert np.array_equal(opt.velocity["w"], [0.0])


def test_nesterov_two_steps_on_square():
    # hand iteration of v <- mu v - lr g ; theta <- theta + mu v - lr g with f = theta^2:
    # step 1: g = 2, v = -0.2, theta = 1 - 0.18 - 0.2 = 0.62
    # step 2: g = 1.24, v = -0.18 - 0.124 = -0.304, theta = 0.62 - 0.2736 - 0.124 = 0.2224
    opt = OptimizerState(0.1, 0.9)
    params = {"t": np.array([1.0])}
    params, opt = nesterov_step(opt, params, {"t": 2 * params["t"]})
    assert params["t"][0] == pytest.approx(0.62, abs=1e-15)
    params, opt = nesterov_step(opt, params, {"t": 2 * params["t"]})
    assert params["t"][0] == pytest.approx(0.2224, abs=1e-15)
    assert opt.velocity["t"][0] == pytest.approx(-0.304, abs=1e-15)


def test_gradcheck_constant_loss():
    params = {"a": np.ones((2, 2))}
    rep = finite_diff_check(lambda p: (3.0, {"a": np.zeros((2, 2))}), params)
    assert rep.passed and rep.max_error == 0.0


def test_gradcheck_detects_corruption():
    params = {"a": np.array([1.0, 2.0])}
    good = finite_diff_check(lambda p: (float((p["a"] ** 2).sum()), {"a": 2 * p["a"]}), params)
    bad = finite_diff_check(lambda p: (float((p["a"] ** 2).sum()), {"a": 2 * p["a"] + [0.0, 0.5]}), params)
    assert good.passed and not bad.passed


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([-1.5])}
    save_arrays(tmp_path / "c.ckpt", arrays, {"hidden": 3})
    meta, loaded = load_arrays(tmp_path / "c.ckpt")
    assert meta == {"hidden": 3}
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw.startswith(b"GNNROUTE-CKPT 1\n")
    assert raw.endswith(np.array([-1.5], dtype="<f8").tobytes())


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"hello\n{}\n")
    with pytest.raises(CheckpointError):
        load_arrays(bad)
    save_arrays(tmp_path / "t.ckpt", {"w": np.zeros(4)}, {})
    data = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "t.ckpt")

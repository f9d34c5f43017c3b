import numpy as np
import pytest
from scipy.ndimage import correlate

from appsplat.errors import ShapeMismatch, SpecHashMismatch, StaleCache
from appsplat.net import (AdamState, MLPSpec, Params, adam_step, conv2d, conv2d_backward, gelu,
                          init_mlp, load_checkpoint, mlp_backward, mlp_forward, save_checkpoint,
                          sigmoid)
from conftest import fd_relerr, mlp_fd_errors


def test_zero_layer_maps_to_zero():
    spec = MLPSpec((4, 3), ("none",))
    p = Params({"0.W": np.zeros((4, 3)), "0.b": np.zeros(3)})
    y, _ = mlp_forward(spec, p, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(y, 0.0)


def test_sigmoid_at_zero():
    assert sigmoid(0.0) == 0.5


def test_two_layer_matches_matmul_oracle():
    rng = np.random.default_rng(1)
    spec = MLPSpec((3, 5, 2), ("relu", "sigmoid"))
    W0, b0, W1, b1 = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=(5, 2)), rng.normal(size=2)
    p = Params({"0.W": W0, "0.b": b0, "1.W": W1, "1.b": b1})
    x = rng.normal(size=(7, 3))
    y, _ = mlp_forward(spec, p, x)
    h = np.maximum(x @ W0 + b0, 0)
    np.testing.assert_allclose(y, 1 / (1 + np.exp(-(h @ W1 + b1))), rtol=1e-14)


def test_gelu_matches_erf_definition():
    from math import erf, sqrt

    for x in (-2.0, -0.3, 0.0, 0.7, 3.0):
        assert abs(gelu(np.float64(x)) - 0.5 * x * (1 + erf(x / sqrt(2)))) < 1e-15


def test_zero_upstream_zero_grads():
    spec = MLPSpec((4, 6, 2), ("gelu", "none"), ("layernorm", "none"))
    p = init_mlp(spec)
    _, cache = mlp_forward(spec, p, np.ones((3, 4)))
    grads, dx = mlp_backward(cache, np.zeros((3, 2)))
    assert not any(np.any(g) for g in grads.values()) and not np.any(dx)


def test_identity_net_passes_gradient():
    spec = MLPSpec((3, 3), ("none",))
    p = Params({"0.W": np.eye(3), "0.b": np.zeros(3)})
    _, cache = mlp_forward(spec, p, np.array([0.3, -1.0, 2.0]))
    g = np.array([1.0, 2.0, -3.0])
    np.testing.assert_array_equal(mlp_backward(cache, g)[1], g)


def test_mlp_finite_differences():
    errs = mlp_fd_errors(0)
    assert max(errs.values()) < 1e-4, errs


def test_stale_cache_detected():
    spec = MLPSpec((2, 2), ("none",))
    p = init_mlp(spec)
    _, cache = mlp_forward(spec, p, np.ones(2))
    p.version += 1
    with pytest.raises(StaleCache):
        mlp_backward(cache, np.ones(2))


def test_input_width_checked():
    spec = MLPSpec((2, 2), ("none",))
    with pytest.raises(ShapeMismatch):
        mlp_forward(spec, init_mlp(spec), np.ones(3))


def test_adam_zero_gradient_is_noop():
    p = Params({"w": np.array([1.5, -2.0])})
    out = adam_step(AdamState(lr=0.1), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_first_step_closed_form():
    # m1 = (1-b1) g, v1 = (1-b2) g^2, bias-corrected to g and g^2
    st = AdamState(lr=0.1)
    out = adam_step(st, Params({"w": np.array([1.0])}), {"w": np.array([1.0])})
    m_hat = (1 - 0.9) * 1.0 / (1 - 0.9)
    v_hat = (1 - 0.999) * 1.0 / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert out["w"][0] == expected
    assert abs((1.0 - out["w"][0]) - 0.1 / (1 + 1e-8)) < 1e-15


def test_adam_replay_is_deterministic():
    rng = np.random.default_rng(0)
    p = Params({"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))})
    grads = [{k: rng.normal(size=v.shape) for k, v in p.items()} for _ in range(3)]
    s1, s2 = AdamState(), AdamState()
    p1 = p2 = p
    for g in grads[:2]:
        p1 = adam_step(s1, p1, g)
    s3 = s1.copy()
    p3 = adam_step(s3, p1, grads[2])
    for g in grads[:2]:
        p2 = adam_step(s2, p2, g)
    p2 = adam_step(s2, p2, grads[2])
    for k in p:
        np.testing.assert_array_equal(p2[k], p3[k])


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5, 2))
    Wk = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    y, _ = conv2d(x, Wk, b)
    for co in range(4):
        ref = sum(correlate(x[..., ci], Wk[..., ci, co], mode="constant") for ci in range(2)) + b[co]
        np.testing.assert_allclose(y[..., co], ref, atol=1e-12)


def test_conv2d_backward_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4, 2))
    Wk = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(5, 4, 3))
    f = lambda X, K: float(np.sum(g * conv2d(X, K, b)[0]))
    _, cols = conv2d(x, Wk, b)
    dx, dW, db = conv2d_backward(x.shape, cols, Wk, g)
    h = 1e-6
    fdx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fdx[idx] = (f(xp, Wk) - f(xm, Wk)) / (2 * h)
    assert fd_relerr(fdx, dx) < 1e-6
    np.testing.assert_allclose(db, g.sum(axis=(0, 1)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    p = Params({"a.W": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "s": np.array(2.0)})
    path = tmp_path / "ck.bin"
    save_checkpoint(path, p, "abc123")
    q, h = load_checkpoint(path, expected_hash="abc123")
    assert h == "abc123" and set(q) == set(p)
    for k in p:
        np.testing.assert_array_equal(q[k], p[k].astype(np.float32).astype(np.float64))
    with pytest.raises(SpecHashMismatch):
        load_checkpoint(path, expected_hash="other")
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")

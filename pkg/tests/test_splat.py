import math

import numpy as np
import pytest

from appsplat import splat
from appsplat.errors import DegenerateCovariance
from appsplat.geom import Camera, Gaussians, generate_scene, SceneSpec
from conftest import small_splat_scene, splat_fd_errors

BACKENDS = ["cython", "numpy"]


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_scene_is_background(backend):
    cam = Camera(20, 20, 7.5, 7.5, 16, 16)
    out = splat.render(Gaussians.empty(), np.zeros((0, 3)), cam, (0.1, 0.2, 0.3), backend=backend)
    np.testing.assert_array_equal(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)))
    np.testing.assert_array_equal(out.alpha, 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_saturated_gaussian_hits_alpha_clamp(backend):
    cam = Camera(20, 20, 8.0, 8.0, 17, 17)
    gs = Gaussians([[0.0, 0.0, 3.0]], np.log([[0.2, 0.2, 0.2]]), [[1.0, 0, 0, 0]], [40.0])
    out = splat.render(gs, [[1.0, 1.0, 1.0]], cam, backend=backend)
    assert out.alpha[8, 8] == splat.ALPHA_MAX == 0.999
    assert out.alpha.max() == out.alpha[8, 8]


def _alpha_at(p, i, x, y):
    dx, dy = x - p.uv[i, 0], y - p.uv[i, 1]
    A, B, C = p.conic[i]
    return min(splat.ALPHA_MAX, p.opac[i] * math.exp(-0.5 * (A * dx * dx + 2 * B * dx * dy + C * dy * dy)))


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_gaussian_compositing_oracle(backend):
    cam = Camera(20, 20, 7.5, 7.5, 16, 16)
    gs = Gaussians([[0.05, 0.0, 3.0], [-0.05, 0.02, 3.4]], np.log([[0.2, 0.15, 0.1]] * 2),
                   [[1.0, 0, 0, 0], [0.9, 0.1, 0.3, 0.0]], [0.5, 1.0])
    c = np.array([[0.9, 0.1, 0.2], [0.1, 0.8, 0.3]])
    bg = np.array([0.2, 0.2, 0.6])
    out = splat.render(gs, c, cam, bg, backend=backend)
    p = splat.project_gaussians(gs, cam)
    for x, y in ((7, 7), (8, 8), (5, 9)):
        a1, a2 = _alpha_at(p, 0, x, y), _alpha_at(p, 1, x, y)   # 0 is nearer
        w1, w2 = a1, a2 * (1 - a1)
        np.testing.assert_allclose(out.rgb[y, x], w1 * c[0] + w2 * c[1] + (1 - w1 - w2) * bg,
                                   rtol=0, atol=1e-14)


def test_backends_agree_and_threads_are_deterministic():
    s = generate_scene(SceneSpec(seed=3, n_gaussians=40, width=32, height=24))
    cam = s.cameras[0]
    Wc = splat.rasterize(s.gaussians, cam, backend="cython").W
    Wn = splat.rasterize(s.gaussians, cam, backend="numpy").W
    np.testing.assert_allclose(Wc, Wn, rtol=0, atol=1e-15)
    W4 = splat.rasterize(s.gaussians, cam, threads=4, backend="cython").W
    np.testing.assert_array_equal(Wc, W4)


def test_default_backend_is_reported():
    assert splat.BACKEND in ("cython", "numpy")
    assert splat.get_backend("numpy") is not None
    with pytest.raises(ValueError):
        splat.get_backend("cuda")


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_upstream_gives_zero_gradients(backend):
    gs, col, cam = small_splat_scene(0)
    g = splat.render_backward(gs, col, cam, (0.3, 0.3, 0.3), np.zeros((16, 16, 3)), backend=backend)
    for arr in (g.mean, g.log_scale, g.rotation, g.opacity_logit, g.color, g.background):
        assert not np.any(arr)


@pytest.mark.parametrize("backend", BACKENDS)
def test_color_gradient_is_weight_sum(backend):
    gs, col, cam = small_splat_scene(1, n=1)
    g = splat.render_backward(gs, col, cam, (0, 0, 0), np.ones((16, 16, 3)), backend=backend)
    W = splat.rasterize(gs, cam, backend=backend).W
    np.testing.assert_allclose(g.color[0], np.full(3, W[:, 0].sum()), rtol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_finite_differences(backend):
    errs = splat_fd_errors(0, backend)
    assert max(errs.values()) < 1e-3, errs


def test_depth_is_alpha_normalised():
    gs, col, cam = small_splat_scene(2)
    r = splat.rasterize(gs, cam)
    d = r.depth()
    hit = r.alpha.reshape(16, 16) > 0.5
    p = r.proj
    assert np.all(d[hit] >= p.depth.min() - 1e-12) and np.all(d[hit] <= p.depth.max() + 1e-12)


def test_degenerate_covariance_raises():
    gs = Gaussians([[0.0, 0.0, 3.0]], [[0.0, 0.0, 0.0]], [[np.nan, 0, 0, 0]], [0.0])
    with pytest.raises(DegenerateCovariance):
        splat.rasterize(gs, Camera(20, 20, 7.5, 7.5, 16, 16))


def test_behind_camera_gaussian_is_skipped():
    gs = Gaussians([[0.0, 0.0, -3.0]], np.log([[0.2] * 3]), [[1.0, 0, 0, 0]], [3.0])
    r = splat.rasterize(gs, Camera(20, 20, 7.5, 7.5, 16, 16))
    assert not r.W.any()

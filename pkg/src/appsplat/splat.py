"""Differentiable Gaussian splatting: forward rendering and analytic gradients.

Rendering is split in two stages.  :func:`rasterize` projects the Gaussians
and builds the dense per-pixel compositing-weight matrix ``W`` (``H*W x N``);
:func:`composite` turns ``W`` plus per-Gaussian colours into an image.  Because
an image is linear in the colours for fixed geometry, training code can keep a
:class:`Raster` per camera and re-composite many colour sets cheaply.

The pixel x Gaussian inner loop runs in the compiled ``_raster`` extension when
it is importable and in ``_raster_py`` otherwise (set ``APPSPLAT_PURE=1`` to
force the fallback).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _raster_py
from .errors import DegenerateCovariance
from .geom import LOG_SCALE_MAX, LOG_SCALE_MIN, Camera, Gaussians, quat_to_matrix

try:
    if os.environ.get("APPSPLAT_PURE"):
        raise ImportError("pure backend requested")
    from . import _raster as _kernel
    BACKEND = "cython"
except ImportError:
    _kernel = _raster_py
    BACKEND = "numpy"

DILATION = 0.3      # px^2 added to the projected covariance diagonal
# Mahalanobis radius beyond which a Gaussian is skipped; exp(-d2/2) < 2**-53
# there, so culling never changes a result by more than rounding.
CULL_SIGMA = math.sqrt(2 * 53 * math.log(2))
TILE = 16
ALPHA_MAX = _raster_py.ALPHA_MAX


def get_backend(name: str | None = None):
    if name is None:
        return _kernel
    if name == "numpy":
        return _raster_py
    if name == "cython":
        from . import _raster
        return _raster
    raise ValueError(f"unknown backend {name!r}")


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities plus what backward needs."""

    uv: np.ndarray        # (N, 2)
    conic: np.ndarray     # (N, 3) A, B, C
    opac: np.ndarray      # (N,)
    depth: np.ndarray     # (N,) camera-space z
    valid: np.ndarray     # (N,) bool, in front of the camera and on screen
    order: np.ndarray     # valid indices, front to back
    bbox: np.ndarray      # (N, 4) x0, x1, y0, y1 inclusive
    t: np.ndarray         # camera-space means
    J: np.ndarray         # (N, 2, 3)
    cov_cam: np.ndarray   # (N, 3, 3)
    cov2d: np.ndarray     # (N, 2, 2), dilated
    M: np.ndarray         # (N, 3, 3) = R_q diag(scale)
    Rq: np.ndarray
    scale: np.ndarray
    scale_live: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray


def project_gaussians(gs: Gaussians, cam: Camera) -> Projected:
    n = len(gs)
    Rc = cam.R
    t = gs.means @ Rc.T + cam.translation
    tz = t[:, 2]
    front = (tz > cam.near) & (tz < cam.far)
    tz_safe = np.where(front, tz, 1.0)
    tx, ty = t[:, 0], t[:, 1]

    uv = np.stack([cam.fx * tx / tz_safe + cam.cx, cam.fy * ty / tz_safe + cam.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz_safe
    J[:, 0, 2] = -cam.fx * tx / tz_safe**2
    J[:, 1, 1] = cam.fy / tz_safe
    J[:, 1, 2] = -cam.fy * ty / tz_safe**2

    qnorm = np.linalg.norm(gs.quats, axis=1)
    qn = gs.quats / np.where(qnorm > 0, qnorm, 1.0)[:, None]
    Rq = quat_to_matrix(qn) if n else np.zeros((0, 3, 3))
    ls = gs.log_scales
    scale_live = (ls >= LOG_SCALE_MIN) & (ls <= LOG_SCALE_MAX)
    scale = np.exp(np.clip(ls, LOG_SCALE_MIN, LOG_SCALE_MAX))
    M = Rq * scale[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    cov_cam = Rc @ cov @ Rc.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    bad = front & ~(np.isfinite(det) & (det > 0))
    if np.any(bad):
        raise DegenerateCovariance(f"projected covariance not invertible for Gaussians {np.flatnonzero(bad)[:8].tolist()}")
    det_safe = np.where(front, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)

    # screen bounds of the cutoff ellipse, padded by a pixel
    rx = CULL_SIGMA * np.sqrt(np.where(front, a, 0.0))
    ry = CULL_SIGMA * np.sqrt(np.where(front, c, 0.0))
    big = 1e9
    x0 = np.floor(np.clip(uv[:, 0] - rx, -big, big)) - 1
    x1 = np.ceil(np.clip(uv[:, 0] + rx, -big, big)) + 1
    y0 = np.floor(np.clip(uv[:, 1] - ry, -big, big)) - 1
    y1 = np.ceil(np.clip(uv[:, 1] + ry, -big, big)) + 1
    on_screen = (x1 >= 0) & (x0 <= cam.width - 1) & (y1 >= 0) & (y0 <= cam.height - 1)
    valid = front & on_screen
    bbox = np.stack([np.clip(x0, 0, cam.width - 1), np.clip(x1, 0, cam.width - 1),
                     np.clip(y0, 0, cam.height - 1), np.clip(y1, 0, cam.height - 1)],
                    axis=1).astype(np.int64)
    vidx = np.flatnonzero(valid)
    order = vidx[np.argsort(tz[vidx], kind="stable")].astype(np.int64)
    return Projected(uv, conic, expit(gs.opacity_logits), tz, valid, order, bbox, t, J,
                     cov_cam, cov2d, M, Rq, scale, scale_live, qn, qnorm)


@dataclass
class Raster:
    """Geometry-only result of rasterising Gaussians for one camera."""

    cam: Camera
    proj: Projected
    W: np.ndarray       # (H*W, N) compositing weights
    alpha: np.ndarray   # (H*W,) sum of weights
    backend: object

    @property
    def shape(self) -> tuple[int, int]:
        return self.cam.height, self.cam.width

    def depth(self) -> np.ndarray:
        """Alpha-normalised expected depth; 0 where nothing is hit."""
        num = self.W @ self.proj.depth if self.W.shape[1] else np.zeros(len(self.alpha))
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(self.alpha > 0, num / np.where(self.alpha > 0, self.alpha, 1.0), 0.0)
        return d.reshape(self.shape)


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (H, W, 3)
    depth: np.ndarray   # (H, W)
    alpha: np.ndarray   # (H, W)


@dataclass
class SplatGradients:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    background: np.ndarray


def rasterize(gs: Gaussians, cam: Camera, threads: int = 1, backend: str | None = None) -> Raster:
    kern = get_backend(backend)
    proj = project_gaussians(gs, cam)
    W = kern.forward(np.ascontiguousarray(proj.uv), np.ascontiguousarray(proj.conic),
                     np.ascontiguousarray(proj.opac), proj.order, proj.bbox,
                     cam.height, cam.width, CULL_SIGMA**2, TILE, threads)
    return Raster(cam, proj, W, W.sum(axis=1), kern)


def composite(raster: Raster, colors, background) -> np.ndarray:
    """``rgb = W c + (1 - sum W) bg`` as an ``(H, W, 3)`` image."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    rgb = raster.W @ colors + (1.0 - raster.alpha)[:, None] * bg[None, :]
    return rgb.reshape(raster.shape + (3,))


def composite_backward(raster: Raster, colors, background, d_rgb):
    """Gradients of :func:`composite` w.r.t. colours, background and ``W``."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    g = np.asarray(d_rgb, dtype=np.float64).reshape(-1, 3)
    d_colors = raster.W.T @ g
    d_bg = (1.0 - raster.alpha) @ g
    d_W = g @ (colors - bg[None, :]).T
    return d_colors, d_bg, d_W


def render(gs: Gaussians, colors, cam: Camera, background=(0.0, 0.0, 0.0),
           threads: int = 1, backend: str | None = None) -> RenderOutput:
    r = rasterize(gs, cam, threads=threads, backend=backend)
    rgb = composite(r, colors, background)
    return RenderOutput(rgb, r.depth(), r.alpha.reshape(r.shape))


def geometry_backward(raster: Raster, gs: Gaussians, d_W, d_depth_gauss=None, threads: int = 1):
    """Chain ``dL/dW`` (and optional ``dL/d(per-Gaussian depth)``) to parameters."""
    p = raster.proj
    cam = raster.cam
    n = len(gs)
    d_W = np.ascontiguousarray(d_W, dtype=np.float64)
    g6 = raster.backend.backward(np.ascontiguousarray(p.uv), np.ascontiguousarray(p.conic),
                                 np.ascontiguousarray(p.opac), p.order, p.bbox, d_W,
                                 cam.height, cam.width, CULL_SIGMA**2, TILE, threads)
    du, dv, dA, dB, dC, dop = g6.T
    valid = p.valid

    # conic = inv(cov2d); dL/dcov2d = -K G K with symmetric G
    K = np.empty((n, 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = p.conic[:, 0], p.conic[:, 1], p.conic[:, 1], p.conic[:, 2]
    G = np.empty((n, 2, 2))
    G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = dA, 0.5 * dB, 0.5 * dB, dC
    G_cov2d = -K @ G @ K
    JT = np.swapaxes(p.J, 1, 2)
    G_J = 2.0 * G_cov2d @ p.J @ p.cov_cam
    G_covc = JT @ G_cov2d @ p.J
    Rc = cam.R
    G_cov = Rc.T @ G_covc @ Rc
    G_M = 2.0 * G_cov @ p.M
    G_Rq = G_M * p.scale[:, None, :]
    G_scale = np.sum(G_M * p.Rq, axis=1)
    d_log_scale = np.where(p.scale_live, G_scale * p.scale, 0.0)
    d_rot = _quat_backward(p.qn, p.qnorm, G_Rq)

    tz = np.where(valid, p.t[:, 2], 1.0)
    tx, ty = p.t[:, 0], p.t[:, 1]
    fx, fy = cam.fx, cam.fy
    dt = np.zeros((n, 3))
    dt[:, 0] = du * fx / tz + G_J[:, 0, 2] * (-fx / tz**2)
    dt[:, 1] = dv * fy / tz + G_J[:, 1, 2] * (-fy / tz**2)
    dt[:, 2] = (du * (-fx * tx / tz**2) + dv * (-fy * ty / tz**2)
                + G_J[:, 0, 0] * (-fx / tz**2) + G_J[:, 1, 1] * (-fy / tz**2)
                + G_J[:, 0, 2] * (2 * fx * tx / tz**3) + G_J[:, 1, 2] * (2 * fy * ty / tz**3))
    if d_depth_gauss is not None:
        dt[:, 2] += d_depth_gauss
    d_mean = dt @ Rc
    op = p.opac
    d_opacity = dop * op * (1.0 - op)

    mask = valid[:, None]
    return (np.where(mask, d_mean, 0.0), np.where(mask, d_log_scale, 0.0),
            np.where(mask, d_rot, 0.0), np.where(valid, d_opacity, 0.0))


def _quat_backward(qn, qnorm, G_R):
    w, x, y, z = qn.T
    g = G_R.reshape(-1, 9)
    # d R_ij / d (w, x, y, z), rows in R row-major order
    zero = np.zeros_like(w)
    dR = np.stack([
        np.stack([zero, zero, -4 * y, -4 * z], -1),
        np.stack([-2 * z, 2 * y, 2 * x, -2 * w], -1),
        np.stack([2 * y, 2 * z, 2 * w, 2 * x], -1),
        np.stack([2 * z, 2 * y, 2 * x, 2 * w], -1),
        np.stack([zero, -4 * x, zero, -4 * z], -1),
        np.stack([-2 * x, -2 * w, 2 * z, 2 * y], -1),
        np.stack([-2 * y, 2 * z, -2 * w, 2 * x], -1),
        np.stack([2 * x, 2 * w, 2 * z, 2 * y], -1),
        np.stack([zero, -4 * x, -4 * y, zero], -1),
    ], axis=1)  # (N, 9, 4)
    d_qn = np.einsum("nk,nkj->nj", g, dR)
    proj = d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)
    return proj / np.where(qnorm > 0, qnorm, 1.0)[:, None]


def render_backward(gs: Gaussians, colors, cam: Camera, background, d_rgb,
                    d_depth=None, d_alpha=None, threads: int = 1,
                    backend: str | None = None, raster: Raster | None = None) -> SplatGradients:
    """Analytic gradients of the rendered image w.r.t. every input.

    ``d_depth`` / ``d_alpha`` are optional upstream gradients for the depth
    and alpha images.
    """
    r = raster if raster is not None else rasterize(gs, cam, threads=threads, backend=backend)
    d_colors, d_bg, d_W = composite_backward(r, colors, background, d_rgb)
    d_z = None
    if d_alpha is not None:
        d_W = d_W + np.asarray(d_alpha, dtype=np.float64).reshape(-1, 1)
    if d_depth is not None:
        gd = np.asarray(d_depth, dtype=np.float64).reshape(-1)
        hit = r.alpha > 0
        inv = np.where(hit, 1.0 / np.where(hit, r.alpha, 1.0), 0.0)
        dep = r.depth().reshape(-1)
        d_W = d_W + (gd * inv)[:, None] * (r.proj.depth[None, :] - dep[:, None])
        d_z = r.W.T @ (gd * inv)
    d_mean, d_ls, d_rot, d_op = geometry_backward(r, gs, d_W, d_z, threads=threads)
    return SplatGradients(d_mean, d_ls, d_rot, d_op, d_colors, d_bg)

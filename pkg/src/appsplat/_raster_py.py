"""Pure-numpy rasterisation kernels (fallback for the compiled ``_raster``).

Both backends share one contract:

``forward(uv, conic, opac, order, bbox, height, width, cutoff2, tile, threads)``
    returns the dense compositing-weight matrix ``W`` of shape ``(H*W, N)``
    where ``W[p, i] = alpha_i(p) * prod_{j before i} (1 - alpha_j(p))``.

``backward(uv, conic, opac, order, bbox, dW, height, width, cutoff2, tile, threads)``
    returns ``(N, 6)`` gradients w.r.t. ``(u, v, A, B, C, opacity)`` given
    ``dL/dW``.  The conic parametrises ``d2 = A dx^2 + 2 B dx dy + C dy^2``.

``bbox``, ``tile`` and ``threads`` only matter for the compiled kernel; here
everything is evaluated densely.
"""

import numpy as np

ALPHA_MAX = 0.999


def _alphas(uv, conic, opac, order, height, width, cutoff2):
    ys, xs = np.divmod(np.arange(height * width), width)
    dx = xs[:, None] - uv[order, 0][None, :]
    dy = ys[:, None] - uv[order, 1][None, :]
    A, B, C = (conic[order, k][None, :] for k in range(3))
    d2 = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    active = d2 <= cutoff2
    g = np.where(active, np.exp(-0.5 * np.where(active, d2, 0.0)), 0.0)
    a = opac[order][None, :] * g
    clamped = a > ALPHA_MAX
    a = np.where(clamped, ALPHA_MAX, a)
    return dx, dy, g, a, active, clamped


def _transmittance(a):
    one_minus = 1.0 - a
    T = np.ones_like(a)
    if a.shape[1] > 1:
        T[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    return T


def forward(uv, conic, opac, order, bbox, height, width, cutoff2, tile=16, threads=1):
    n = len(opac)
    W = np.zeros((height * width, n))
    if len(order) == 0:
        return W
    _, _, _, a, _, _ = _alphas(uv, conic, opac, order, height, width, cutoff2)
    W[:, order] = a * _transmittance(a)
    return W


def backward(uv, conic, opac, order, bbox, dW, height, width, cutoff2, tile=16, threads=1):
    n = len(opac)
    out = np.zeros((n, 6))
    if len(order) == 0:
        return out
    dx, dy, g, a, active, clamped = _alphas(uv, conic, opac, order, height, width, cutoff2)
    T = _transmittance(a)
    w = a * T
    dws = dW[:, order]
    contrib = dws * w
    # S[:, k] = sum_{j > k} dW_j W_j
    S = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    dalpha = T * dws - S / (1.0 - a)
    live = active & ~clamped
    dalpha = np.where(live, dalpha, 0.0)
    dd2 = dalpha * (-0.5 * a)
    A, B, C = (conic[order, k][None, :] for k in range(3))
    out[order, 0] = np.sum(dd2 * -(2.0 * A * dx + 2.0 * B * dy), axis=0)
    out[order, 1] = np.sum(dd2 * -(2.0 * B * dx + 2.0 * C * dy), axis=0)
    out[order, 2] = np.sum(dd2 * dx * dx, axis=0)
    out[order, 3] = np.sum(dd2 * 2.0 * dx * dy, axis=0)
    out[order, 4] = np.sum(dd2 * dy * dy, axis=0)
    out[order, 5] = np.sum(dalpha * g, axis=0)
    return out

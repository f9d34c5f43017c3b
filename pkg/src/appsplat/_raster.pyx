# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tile rasteriser; same contract as ``_raster_py``.

Pixels are binned into square tiles and each tile only visits the Gaussians
whose (conservative) bounding box overlaps it.  Tiles are processed
in parallel with OpenMP; every pixel is owned by exactly one tile and per-tile
gradient partials are reduced in tile order afterwards, so results do not
depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double ALPHA_MAX = 0.999


def _bin_tiles(cnp.int64_t[:] order, cnp.int64_t[:, :] bbox, int height, int width, int tile):
    """CSR lists of (depth-sorted) Gaussian indices per tile."""
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    cdef cnp.int64_t[:] cnt = counts
    cdef Py_ssize_t k, g
    cdef int tx, ty, tx0, tx1, ty0, ty1
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                cnt[ty * ntx + tx + 1] += 1
    ptr = np.cumsum(counts)
    cdef cnp.int64_t[:] p = ptr
    idx = np.empty(ptr[-1], dtype=np.int64)
    cdef cnp.int64_t[:] ix = idx
    fill = ptr[:-1].copy()
    cdef cnp.int64_t[:] f = fill
    for k in range(order.shape[0]):
        g = order[k]
        tx0 = bbox[g, 0] // tile
        tx1 = bbox[g, 1] // tile
        ty0 = bbox[g, 2] // tile
        ty1 = bbox[g, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                ix[f[ty * ntx + tx]] = g
                f[ty * ntx + tx] += 1
    return ptr, idx, ntx, nty


def forward(double[:, :] uv, double[:, :] conic, double[:] opac, order, bbox,
            int height, int width, double cutoff2, int tile=16, int threads=1):
    cdef Py_ssize_t n = opac.shape[0]
    out = np.zeros((height * width, n), dtype=np.float64)
    if len(order) == 0:
        return out
    cdef double[:, :] W = out
    ptr_, idx_, ntx, nty = _bin_tiles(np.ascontiguousarray(order, dtype=np.int64),
                                      np.ascontiguousarray(bbox, dtype=np.int64),
                                      height, width, tile)
    cdef cnp.int64_t[:] ptr = ptr_
    cdef cnp.int64_t[:] idx = idx_
    cdef int ntiles = ntx * nty
    cdef int ntx_ = ntx
    cdef int t, tx, ty, x, y, x1, y1
    cdef Py_ssize_t k, g, p
    cdef double T, dx, dy, d2, a
    for t in prange(ntiles, nogil=True, num_threads=threads, schedule="static"):
        ty = t // ntx_
        tx = t - ty * ntx_
        y1 = min((ty + 1) * tile, height)
        x1 = min((tx + 1) * tile, width)
        for y in range(ty * tile, y1):
            for x in range(tx * tile, x1):
                p = y * width + x
                T = 1.0
                for k in range(ptr[t], ptr[t + 1]):
                    g = idx[k]
                    dx = x - uv[g, 0]
                    dy = y - uv[g, 1]
                    d2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if d2 > cutoff2:
                        continue
                    a = opac[g] * exp(-0.5 * d2)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    W[p, g] = a * T
                    T = T * (1.0 - a)
    return out


def backward(double[:, :] uv, double[:, :] conic, double[:] opac, order, bbox,
             double[:, :] dW, int height, int width, double cutoff2, int tile=16,
             int threads=1):
    cdef Py_ssize_t n = opac.shape[0]
    if len(order) == 0:
        return np.zeros((n, 6))
    ptr_, idx_, ntx, nty = _bin_tiles(np.ascontiguousarray(order, dtype=np.int64),
                                      np.ascontiguousarray(bbox, dtype=np.int64),
                                      height, width, tile)
    cdef cnp.int64_t[:] ptr = ptr_
    cdef cnp.int64_t[:] idx = idx_
    cdef int ntiles = ntx * nty
    cdef int ntx_ = ntx
    acc_ = np.zeros((ntiles, n, 6), dtype=np.float64)
    cdef double[:, :, :] acc = acc_
    cdef Py_ssize_t maxlen = 1
    cdef int t
    for t in range(ntiles):
        maxlen = max(maxlen, ptr[t + 1] - ptr[t])
    cdef int tx, ty, x, y, x1, y1
    cdef Py_ssize_t k, g, p, m, j
    cdef double T, dx, dy, d2, a, S, w, dwg, dal, dd2, A, B, C
    cdef double *abuf
    cdef double *tbuf
    cdef double *gbuf
    cdef char *flag
    with nogil, parallel(num_threads=threads):
        abuf = <double *> malloc(maxlen * sizeof(double))
        tbuf = <double *> malloc(maxlen * sizeof(double))
        gbuf = <double *> malloc(maxlen * sizeof(double))
        flag = <char *> malloc(maxlen * sizeof(char))
        for t in prange(ntiles, schedule="static"):
            ty = t // ntx_
            tx = t - ty * ntx_
            y1 = min((ty + 1) * tile, height)
            x1 = min((tx + 1) * tile, width)
            m = ptr[t + 1] - ptr[t]
            for y in range(ty * tile, y1):
                for x in range(tx * tile, x1):
                    p = y * width + x
                    T = 1.0
                    # forward replay: flag 0 = culled, 1 = live, 2 = clamped
                    for j in range(m):
                        g = idx[ptr[t] + j]
                        dx = x - uv[g, 0]
                        dy = y - uv[g, 1]
                        d2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                        if d2 > cutoff2:
                            flag[j] = 0
                            continue
                        gbuf[j] = exp(-0.5 * d2)
                        a = opac[g] * gbuf[j]
                        flag[j] = 1
                        if a > ALPHA_MAX:
                            a = ALPHA_MAX
                            flag[j] = 2
                        abuf[j] = a
                        tbuf[j] = T
                        T = T * (1.0 - a)
                    S = 0.0
                    for j in range(m - 1, -1, -1):
                        if flag[j] == 0:
                            continue
                        g = idx[ptr[t] + j]
                        a = abuf[j]
                        w = a * tbuf[j]
                        dwg = dW[p, g]
                        dal = tbuf[j] * dwg - S / (1.0 - a)
                        S = S + dwg * w
                        if flag[j] == 2:
                            continue
                        dx = x - uv[g, 0]
                        dy = y - uv[g, 1]
                        A = conic[g, 0]
                        B = conic[g, 1]
                        C = conic[g, 2]
                        dd2 = dal * (-0.5 * a)
                        acc[t, g, 0] += dd2 * -(2.0 * A * dx + 2.0 * B * dy)
                        acc[t, g, 1] += dd2 * -(2.0 * B * dx + 2.0 * C * dy)
                        acc[t, g, 2] += dd2 * dx * dx
                        acc[t, g, 3] += dd2 * 2.0 * dx * dy
                        acc[t, g, 4] += dd2 * dy * dy
                        acc[t, g, 5] += dal * gbuf[j]
        free(abuf)
        free(tbuf)
        free(gbuf)
        free(flag)
    return acc_.sum(axis=0)

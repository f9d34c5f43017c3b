"""Image metrics and the 2x2 cross-appearance protocol.

Rows of the protocol are the geometry/feature source, columns the embedding
source; every render is scored against the ground truth lit like its
embedding source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .appearance import AppearanceModel, color_eval
from .errors import ShapeMismatch, TooSmall
from .net import sigmoid

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def psnr(a, b) -> float:
    """``10 log10(1 / mse)`` for peak 1.0, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    m = float(np.mean((a - b) ** 2))
    if m < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def _window() -> np.ndarray:
    x = np.arange(SSIM_WIN, dtype=np.float64) - SSIM_WIN // 2
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filt(x, k):
    # valid-region separable filtering: only fully covered windows
    y = correlate1d(x, k, axis=0, mode="constant")
    y = correlate1d(y, k, axis=1, mode="constant")
    r = len(k) // 2
    return y[r:-r, r:-r]


def ssim(a, b) -> float:
    """Gaussian-window SSIM averaged over valid windows and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise TooSmall(f"SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    k = _window()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filt(x, k), _filt(y, k)
        sxx = _filt(x * x, k) - mx * mx
        syy = _filt(y * y, k) - my * my
        sxy = _filt(x * y, k) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricRow:
    geometry: str       # "src" | "aug"
    embedding: str      # "src" | "aug"
    psnr: float
    ssim: float
    psnr_other: float   # against the ground truth of the other appearance

    @property
    def matched(self) -> bool:
        return self.geometry == self.embedding


def render_combo(model: AppearanceModel, sd, feat, a) -> np.ndarray:
    """Adapted render of ``feat`` under embedding ``a`` for all scene cameras."""
    c = color_eval(feat, a, model.params, model.cfg)[0]
    bg = sigmoid(model.params["bg"])
    rgb = sd.W_all @ c + (1.0 - sd.a_all)[:, None] * bg[None, :]
    H, W = sd.image_shape
    return rgb.reshape(len(sd.cameras), H, W, 3)


def _scores(renders, target):
    p = float(np.mean([psnr(r, t) for r, t in zip(renders, target)]))
    s = float(np.mean([ssim(r, t) for r, t in zip(renders, target)]))
    return p, s


def cross_appearance_eval(model: AppearanceModel, sd, pair) -> list[MetricRow]:
    """Rows (src-geom, aug-geom) x columns (src-emb, aug-emb), row-major."""
    K = sd.n_ring
    streams = {"src": model.stream(pair.src[:K], sd.patch_idx),
               "aug": model.stream(pair.aug[:K], sd.patch_idx)}
    targets = {"src": pair.src, "aug": pair.aug}
    rows = []
    for g in ("src", "aug"):
        for e in ("src", "aug"):
            r = render_combo(model, sd, streams[g].feat, streams[e].a)
            p, s = _scores(r, targets[e])
            other = "aug" if e == "src" else "src"
            p_o = float(np.mean([psnr(x, t) for x, t in zip(r, targets[other])]))
            rows.append(MetricRow(g, e, p, s, p_o))
    return rows


def base_renders(model: AppearanceModel, sd, pair) -> tuple[np.ndarray, np.ndarray]:
    """Base-stream renders of the source and augmented streams."""
    K = sd.n_ring
    out = []
    for imgs in (pair.src[:K], pair.aug[:K]):
        st = model.stream(imgs, sd.patch_idx)
        out.append(render_combo(model, sd, st.feat, np.zeros(model.cfg.d)))
    return out[0], out[1]


def metrics_csv(rows: list[MetricRow], header: str = "", tag: str = "") -> str:
    lines = [f"# {header}"] if header else []
    lines.append("tag,geometry,embedding,psnr,ssim,psnr_other")
    for r in rows:
        lines.append(f"{tag},{r.geometry},{r.embedding},{r.psnr!r},{r.ssim!r},{r.psnr_other!r}")
    return "\n".join(lines) + "\n"


def summarize(rows: list[MetricRow]) -> dict:
    m = [r.psnr for r in rows if r.matched]
    s = [r.psnr for r in rows if not r.matched]
    return {"matched_psnr": float(np.mean(m)), "swapped_psnr": float(np.mean(s))}


def reprojected_pairs(raster_a, raster_b, alpha_min: float = 0.5, rel_tol: float = 0.05):
    """Pixel pairs ``(ya, xa, yb, xb)`` seeing the same surface point.

    Pixels of view ``a`` with enough coverage are lifted with their rendered
    depth, projected into view ``b`` and kept when ``b`` is covered there and
    its rendered depth agrees within ``rel_tol``.
    """
    ca, cb = raster_a.cam, raster_b.cam
    da, db = raster_a.depth(), raster_b.depth()
    aa = raster_a.alpha.reshape(raster_a.shape)
    ab = raster_b.alpha.reshape(raster_b.shape)
    ys, xs = np.nonzero(aa > alpha_min)
    z = da[ys, xs]
    pc = np.stack([(xs - ca.cx) / ca.fx * z, (ys - ca.cy) / ca.fy * z, z], axis=1)
    pw = (pc - ca.translation) @ ca.R
    qb = pw @ cb.R.T + cb.translation
    ok = qb[:, 2] > cb.near
    zb = np.where(ok, qb[:, 2], 1.0)
    xb = np.rint(cb.fx * qb[:, 0] / zb + cb.cx).astype(np.int64)
    yb = np.rint(cb.fy * qb[:, 1] / zb + cb.cy).astype(np.int64)
    ok &= (xb >= 0) & (xb < cb.width) & (yb >= 0) & (yb < cb.height)
    xb, yb = np.where(ok, xb, 0), np.where(ok, yb, 0)
    ok &= ab[yb, xb] > alpha_min
    ok &= np.abs(db[yb, xb] - qb[:, 2]) < rel_tol * qb[:, 2]
    return np.stack([ys[ok], xs[ok], yb[ok], xb[ok]], axis=1)


def lowfreq_disagreement(img_a, img_b, pairs, sigma: float) -> float:
    """Mean absolute difference of the blurred images at matched pixels."""
    from .guidance import blur

    la, lb = blur(img_a, sigma), blur(img_b, sigma)
    pa = la[pairs[:, 0], pairs[:, 1]]
    pb = lb[pairs[:, 2], pairs[:, 3]]
    return float(np.mean(np.abs(pa - pb)))

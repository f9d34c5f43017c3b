"""Temporal history buffer whose colours are recomputed at recall.

Entries keep geometry in the ego frame of their capture timestep together
with the ego->world pose and the cached view feature ``z_img``.  At recall
the geometry is moved into the current ego frame and the colour is
re-evaluated with the current appearance embedding::

    c_hist = sigmoid(f([z_vox_fused; z_img_cached; a_now]))
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import splat
from .appearance import AppearanceModel, ColorPair, GaussianFeatures, factored_color
from .errors import EmptyBuffer, WidthMismatch
from .geom import Gaussians, Pose
from .relight import LightSpec, lambertian_relight


@dataclass(frozen=True)
class HistoryEntry:
    geometry: Gaussians
    z_img: np.ndarray
    t: int
    pose: Pose
    c_capture: np.ndarray = None   # adapted colours at capture (locked baseline)


@dataclass
class Recalled:
    geometry: Gaussians
    colors: ColorPair
    t: int


class HistoryBuffer:
    """FIFO over the last ``horizon`` timesteps; single writer."""

    def __init__(self, horizon: int = 4):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = horizon
        self._entries: deque = deque(maxlen=horizon)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def push(self, gaussians: Gaussians, z_img, pose: Pose, t: int, colors=None) -> "HistoryBuffer":
        """Store one timestep untransformed; evicts the oldest beyond the horizon."""
        z_img = np.array(z_img, dtype=np.float64)
        if z_img.ndim != 2 or len(z_img) != len(gaussians):
            raise WidthMismatch("need one cached feature row per Gaussian")
        pose.inverse()  # must be invertible
        c = None if colors is None else np.array(colors, dtype=np.float64)
        self._entries.append(HistoryEntry(gaussians.copy(), z_img, t, pose, c))
        return self

    def _relative(self, entry: HistoryEntry, pose_now: Pose) -> Pose:
        return pose_now.inverse().compose(entry.pose)

    def recall(self, pose_now: Pose, model: AppearanceModel, a_now, context=None) -> list[Recalled]:
        """Geometry in the current frame with colours recomputed under ``a_now``.

        ``context(n, cfg)`` supplies the fused voxel feature; defaults to the
        model's provider (zeros).
        """
        if not self._entries:
            raise EmptyBuffer("nothing to recall")
        ctx = context if context is not None else model.context
        out = []
        for e in self._entries:
            if e.z_img.shape[1] != model.cfg.d_img:
                raise WidthMismatch(f"cached feature width {e.z_img.shape[1]} != {model.cfg.d_img}")
            feat = GaussianFeatures(ctx(len(e.geometry), model.cfg), e.z_img)
            pair, _ = factored_color(feat, a_now, model.params, model.cfg)
            out.append(Recalled(e.geometry.transformed(self._relative(e, pose_now)), pair, e.t))
        return out

    def recall_locked(self, pose_now: Pose) -> list[tuple[Gaussians, np.ndarray, int]]:
        """Baseline: recall without recompute, colours frozen at capture."""
        if not self._entries:
            raise EmptyBuffer("nothing to recall")
        return [(e.geometry.transformed(self._relative(e, pose_now)), e.c_capture, e.t)
                for e in self._entries]


def age_variance(colors_by_age: list[np.ndarray]) -> float:
    """Mean over Gaussians and channels of the variance across ages."""
    stack = np.stack(colors_by_age)   # (ages, N, 3)
    return float(np.mean(np.var(stack, axis=0)))


@dataclass
class ConsistencyTrace:
    recompute: list   # per-frame variance, frames with at least one recalled age
    locked: list
    frames: list      # rendered current+recalled images (recompute) per frame


def consistency_stream(model: AppearanceModel, sd, lights, horizon: int = 4,
                       poses=None, threads: int = 1) -> ConsistencyTrace:
    """Run a static-scene stream under drifting lights.

    At each step the current Gaussians are coloured from the current views,
    the history is recalled (with recompute, and locked), the union is
    rendered, and the colour variance across Gaussian ages is recorded.
    """
    gs = sd.scene.gaussians
    K = sd.n_ring
    buf = HistoryBuffer(horizon)
    rec, lock, frames = [], [], []
    for t, light in enumerate(lights):
        pose = poses[t] if poses is not None else Pose()
        imgs = np.stack([lambertian_relight(m, light, c.R)
                         for m, c in zip(sd.maps[:K], sd.cameras[:K])])
        st = model.stream(imgs, sd.patch_idx)
        now, _ = factored_color(st.feat, st.a, model.params, model.cfg)
        if len(buf):
            recalled = buf.recall(pose, model, st.a)
            locked = buf.recall_locked(pose)
            rec.append(age_variance([now.c_ada] + [r.colors.c_ada for r in recalled]))
            lock.append(age_variance([now.c_ada] + [c for _, c, _ in locked]))
            union = Gaussians.concat([gs] + [r.geometry for r in recalled])
            cols = np.concatenate([now.c_ada] + [r.colors.c_ada for r in recalled])
            frames.append(splat.render(union, cols, sd.cameras[0], model.background,
                                       threads=threads).rgb)
        buf.push(gs, st.feat.z_img, pose, t, colors=now.c_ada)
    return ConsistencyTrace(rec, lock, frames)


def drifting_lights(start, end, n: int):
    """Linear interpolation of direction, colour, intensity and ambient.

    The first and last lights are ``start`` and ``end`` themselves.
    """
    out = []
    for i in range(n):
        u = i / max(n - 1, 1)
        if u in (0.0, 1.0):
            out.append(start if u == 0.0 else end)
            continue
        lerp = lambda a, b: tuple((1 - u) * np.asarray(a, dtype=np.float64) + u * np.asarray(b))
        out.append(LightSpec(lerp(start.direction, end.direction), lerp(start.color, end.color),
                             (1 - u) * start.intensity + u * end.intensity,
                             (1 - u) * start.ambient + u * end.ambient))
    return out

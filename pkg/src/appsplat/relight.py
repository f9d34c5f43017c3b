"""Physics-based paired data: intrinsic maps and Lambertian relighting.

For a light with world direction ``l_w`` (pointing towards the light), colour
``c``, intensity ``s`` and ambient ``k``, a view with world->camera rotation
``R_v`` is relit as::

    l_v = R_v l_w
    S_v = max(0, N_v . l_v)
    I   = clip(A_v * (s * c * S_v + k), 0, 1)

Albedo and normal maps come from splatting the scene's ground-truth
per-Gaussian albedo and normals, so they are exact up to compositing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import splat
from .geom import Camera, Scene

MASK_EPS = 1e-3

LIGHT_PALETTE = (
    (1.00, 0.92, 0.80),   # warm
    (1.00, 0.80, 0.60),   # sunset
    (0.85, 0.92, 1.00),   # cool
    (0.70, 0.80, 1.00),   # blue hour
    (1.00, 1.00, 1.00),   # neutral
)


@dataclass
class IntrinsicMaps:
    albedo: np.ndarray    # (H, W, 3), premultiplied by coverage
    normals: np.ndarray   # (H, W, 3), camera frame, unit where valid
    mask: np.ndarray      # (H, W) bool
    alpha: np.ndarray     # (H, W)


@dataclass(frozen=True)
class LightSpec:
    direction: tuple = (0.0, 0.0, 1.0)
    color: tuple = (1.0, 1.0, 1.0)
    intensity: float = 1.0
    ambient: float = 0.1

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0:
            raise ValueError("light direction must be a non-zero finite vector")
        object.__setattr__(self, "direction", tuple(float(x) for x in d / n))
        object.__setattr__(self, "color", tuple(float(x) for x in self.color))
        if not (np.isfinite(self.intensity) and np.isfinite(self.ambient)):
            raise ValueError("intensity and ambient must be finite")
        if self.intensity < 0 or self.ambient < 0:
            raise ValueError("intensity and ambient must be >= 0")

    @classmethod
    def from_angles(cls, azimuth: float, elevation: float, **kw) -> "LightSpec":
        ce = math.cos(elevation)
        return cls((ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)), **kw)

    def describe(self) -> str:
        d, c = self.direction, self.color
        return (f"dir={d[0]:.17g},{d[1]:.17g},{d[2]:.17g} color={c[0]:.17g},{c[1]:.17g},{c[2]:.17g} "
                f"intensity={self.intensity:.17g} ambient={self.ambient:.17g}")


@dataclass(frozen=True)
class LightSampling:
    elevation_deg: tuple = (20.0, 70.0)
    intensity: tuple = (0.6, 1.4)
    ambient: tuple = (0.05, 0.3)
    palette: tuple = LIGHT_PALETTE


def sample_light(rng: np.random.Generator, ranges: LightSampling = LightSampling()) -> LightSpec:
    az = rng.uniform(0.0, 2 * math.pi)
    el = math.radians(rng.uniform(*ranges.elevation_deg))
    color = ranges.palette[int(rng.integers(len(ranges.palette)))]
    return LightSpec.from_angles(az, el, color=color,
                                 intensity=float(rng.uniform(*ranges.intensity)),
                                 ambient=float(rng.uniform(*ranges.ambient)))


def sample_light_pair(rng, ranges: LightSampling = LightSampling()) -> tuple[LightSpec, LightSpec]:
    a = sample_light(rng, ranges)
    b = sample_light(rng, ranges)
    while b == a:
        b = sample_light(rng, ranges)
    return a, b


def render_intrinsics(scene: Scene, cam: Camera, threads: int = 1, raster=None) -> IntrinsicMaps:
    r = raster if raster is not None else splat.rasterize(scene.gaussians, cam, threads=threads)
    albedo = splat.composite(r, scene.albedo, (0.0, 0.0, 0.0))
    # normals are composited in [0, 1]; a 0.5 background maps back to the zero vector
    enc = splat.composite(r, 0.5 * (scene.normals + 1.0), (0.5, 0.5, 0.5))
    n_world = 2.0 * enc - 1.0
    n_cam = n_world @ cam.R.T
    norm = np.linalg.norm(n_cam, axis=-1)
    alpha = r.alpha.reshape(r.shape)
    mask = (alpha > MASK_EPS) & (norm > 1e-8)
    normals = np.where(mask[..., None], n_cam / np.where(norm > 1e-8, norm, 1.0)[..., None], 0.0)
    return IntrinsicMaps(albedo, normals, mask, alpha)


def shading(maps: IntrinsicMaps, light: LightSpec, R_v) -> np.ndarray:
    l_v = np.asarray(R_v, dtype=np.float64) @ np.asarray(light.direction)
    return np.maximum(0.0, maps.normals @ l_v)


def lambertian_relight(maps: IntrinsicMaps, light: LightSpec, R_v, background=(0.0, 0.0, 0.0),
                       clip: bool = True) -> np.ndarray:
    S = shading(maps, light, R_v)
    c = np.asarray(light.color, dtype=np.float64)
    img = maps.albedo * (light.intensity * c[None, None, :] * S[..., None] + light.ambient)
    if clip:
        img = np.clip(img, 0.0, 1.0)
    return np.where(maps.mask[..., None], img, np.asarray(background, dtype=np.float64))


@dataclass
class PairedSample:
    src: np.ndarray          # (K, H, W, 3)
    aug: np.ndarray          # (K, H, W, 3)
    cameras: list
    scene_seed: int
    light_src: LightSpec
    light_aug: LightSpec
    albedo: np.ndarray = None    # (K, H, W, 3) albedo maps of the same views
    meta: dict = field(default_factory=dict)


def make_pair(scene: Scene, cameras, light_src: LightSpec, light_aug: LightSpec,
              maps=None, refine=None, threads: int = 1) -> PairedSample:
    """Render one scene under two lights from identical geometry.

    ``maps`` may carry precomputed :class:`IntrinsicMaps` per camera.
    ``refine(image, view_index, light)``, when given, post-processes every
    relit image (e.g. guided diffusion refinement).
    """
    cameras = list(cameras)
    if maps is None:
        maps = [render_intrinsics(scene, c, threads=threads) for c in cameras]
    src, aug = [], []
    for i, (cam, m) in enumerate(zip(cameras, maps)):
        a = lambertian_relight(m, light_src, cam.R)
        b = a if light_aug == light_src else lambertian_relight(m, light_aug, cam.R)
        if refine is not None:
            a = refine(a, i, light_src)
            b = a if light_aug == light_src else refine(b, i, light_aug)
        src.append(a)
        aug.append(b)
    return PairedSample(np.stack(src), np.stack(aug), cameras, scene.spec.seed,
                        light_src, light_aug, np.stack([m.albedo for m in maps]))


def pair_manifest(sample: PairedSample, files: list[str], header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    lines.append(f"scene_seed={sample.scene_seed}")
    lines.append(f"light_src {sample.light_src.describe()}")
    lines.append(f"light_aug {sample.light_aug.describe()}")
    lines += [f"file={f}" for f in files]
    return "\n".join(lines) + "\n"

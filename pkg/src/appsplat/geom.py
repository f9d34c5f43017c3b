"""Cameras, rigid transforms, quaternions and the procedural scene generator.

Conventions: world frame is z-up; cameras follow the OpenCV convention
(x right, y down, z forward).  A camera stores the world->camera rotation as a
unit quaternion ``(w, x, y, z)`` and the world->camera translation, so a world
point ``p`` maps to ``R @ p + t``.  Pixel ``(x, y)`` has its centre at integer
coordinates ``(x, y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .errors import BehindCamera, InvalidSpec

LOG_SCALE_MIN = math.log(1e-4)
LOG_SCALE_MAX = math.log(1e3)


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a (batch of) quaternion(s) ``(w, x, y, z)``.

    The input is normalised first, so ``q`` and ``-q`` give the same matrix.
    """
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix` for a single rotation (w >= 0)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpec("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise InvalidSpec("image size must be positive")
        if not self.near < self.far:
            raise InvalidSpec("near must be < far")
        q = quat_normalize(self.rotation)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        """World -> camera rotation matrix."""
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def world_to_camera(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.R.T + self.translation

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float,
                up=(0.0, 0.0, 1.0), near: float = 0.01, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                   width=width, height=height, rotation=matrix_to_quat(R),
                   translation=-R @ eye, near=near, far=far)


def project(p_world, cam: Camera) -> tuple[float, float, float]:
    """Pinhole projection of one world point to ``(u, v, depth)``."""
    x, y, z = cam.world_to_camera(p_world)
    if z <= cam.near:
        raise BehindCamera(f"camera-space depth {z:.6g} <= near {cam.near}")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, float(z)


def unproject(u: float, v: float, depth: float, cam: Camera) -> np.ndarray:
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.R.T @ (pc - cam.translation)


# ---------------------------------------------------------------------------
# rigid poses (ego poses for the history buffer)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ego -> world: ``p_world = R @ p_ego + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        qi = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(quat_multiply(self.rotation, other.rotation),
                    self.R @ other.translation + self.translation)

    def is_identity(self) -> bool:
        return bool(np.all(self.translation == 0) and abs(self.rotation[0]) == 1.0)


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    feature_id: int = 0


@dataclass
class Gaussians:
    """Struct-of-arrays set of 3D Gaussians.

    Colours are never stored here; they are produced per evaluation by the
    appearance head and passed to the renderer separately.
    """

    means: np.ndarray          # (N, 3)
    log_scales: np.ndarray     # (N, 3)
    quats: np.ndarray          # (N, 4) (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    feature_ids: np.ndarray = None  # (N,) int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        if self.feature_ids is None:
            self.feature_ids = np.arange(n, dtype=np.int64)
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive]) -> "Gaussians":
        if not prims:
            return cls.empty()
        return cls(
            np.stack([p.mean for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.array([p.feature_id for p in prims]),
        )

    def primitives(self) -> list[GaussianPrimitive]:
        return [
            GaussianPrimitive(self.means[i].copy(), self.log_scales[i].copy(),
                              self.quats[i].copy(), float(self.opacity_logits[i]),
                              int(self.feature_ids[i]))
            for i in range(len(self))
        ]

    def copy(self) -> "Gaussians":
        return Gaussians(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                         self.opacity_logits.copy(), self.feature_ids.copy())

    def subset(self, idx) -> "Gaussians":
        return Gaussians(self.means[idx], self.log_scales[idx], self.quats[idx],
                         self.opacity_logits[idx], self.feature_ids[idx])

    @staticmethod
    def concat(parts: Sequence["Gaussians"]) -> "Gaussians":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Gaussians.empty()
        return Gaussians(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("means", "log_scales", "quats", "opacity_logits", "feature_ids")))

    def transformed(self, pose: Pose) -> "Gaussians":
        """Apply a rigid transform to means and orientations."""
        if pose.is_identity() and pose.rotation[0] == 1.0:
            return self.copy()
        means = self.means @ pose.R.T + pose.translation
        quats = quat_multiply(pose.rotation, self.quats)
        return Gaussians(means, self.log_scales.copy(), quats,
                         self.opacity_logits.copy(), self.feature_ids.copy())


# ---------------------------------------------------------------------------
# procedural scenes

DEFAULT_PALETTE = (
    (0.80, 0.20, 0.15),
    (0.20, 0.55, 0.85),
    (0.90, 0.80, 0.25),
    (0.30, 0.70, 0.35),
    (0.75, 0.75, 0.75),
    (0.55, 0.30, 0.65),
    (0.95, 0.55, 0.20),
    (0.35, 0.35, 0.40),
)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_gaussians: int = 32
    extent: float = 1.0
    palette: tuple = DEFAULT_PALETTE
    ground_tiles: int = 0
    n_cameras: int = 3
    cam_radius: float = 3.0
    cam_height: float = 2.0
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 16
    height: int = 16
    fov_deg: float = 50.0
    max_tilt_deg: float = 60.0

    def validate(self) -> None:
        if self.n_gaussians < 1:
            raise InvalidSpec("n_gaussians must be >= 1")
        if not self.extent > 0:
            raise InvalidSpec("extent must be > 0")
        if len(self.palette) == 0:
            raise InvalidSpec("palette must be non-empty")
        if any(len(c) != 3 or min(c) < 0 or max(c) > 1 for c in self.palette):
            raise InvalidSpec("palette colours must be RGB in [0, 1]")
        if self.n_cameras < 1 or self.ground_tiles < 0:
            raise InvalidSpec("bad camera or ground count")
        if self.width < 1 or self.height < 1 or not 0 < self.fov_deg < 180:
            raise InvalidSpec("bad image size or field of view")
        if not self.cam_radius > 0:
            raise InvalidSpec("camera radius must be > 0")


@dataclass
class Scene:
    spec: SceneSpec
    gaussians: Gaussians
    albedo: np.ndarray   # (N, 3)
    normals: np.ndarray  # (N, 3), world frame
    cameras: list        # ring cameras of the current timestep
    future: Camera       # novel-view camera further along the ring

    @property
    def all_cameras(self) -> list:
        return list(self.cameras) + [self.future]


def _frame_from_normal(n: np.ndarray, spin: float) -> np.ndarray:
    """Rotation whose third column is ``n`` (the blob's thin axis)."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    c, s = math.cos(spin), math.sin(spin)
    a, b = c * a + s * b, -s * a + c * b
    return np.stack([a, b, n], axis=1)


def _ring_cameras(spec: SceneSpec) -> tuple[list, Camera]:
    cams = []
    step = 2 * math.pi / spec.n_cameras
    target = np.asarray(spec.look_at, dtype=np.float64)

    def at(theta):
        eye = target + np.array([spec.cam_radius * math.cos(theta),
                                 spec.cam_radius * math.sin(theta), spec.cam_height])
        return Camera.look_at(eye, target, spec.width, spec.height, spec.fov_deg)

    for k in range(spec.n_cameras):
        cams.append(at(k * step))
    # the future frame sits between ring cameras 0 and 1
    future = at(0.5 * step if spec.n_cameras > 1 else 0.35)
    return cams, future


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic synthetic scene: tilted flat blobs over an optional ground grid."""
    spec.validate()
    rng = make_rng(spec.seed, "scene")
    palette = np.asarray(spec.palette, dtype=np.float64)
    e = spec.extent
    means, log_scales, quats, opac, albedo, normals = [], [], [], [], [], []

    g = spec.ground_tiles
    if g:
        cell = 2 * e / g
        for i in range(g):
            for j in range(g):
                means.append([-e + (i + 0.5) * cell, -e + (j + 0.5) * cell, 0.0])
                log_scales.append(np.log([0.45 * cell, 0.45 * cell, 0.02 * cell]))
                quats.append([1.0, 0.0, 0.0, 0.0])
                opac.append(3.0)
                albedo.append(palette[rng.integers(len(palette))])
                normals.append([0.0, 0.0, 1.0])

    max_tilt = math.radians(spec.max_tilt_deg)
    for _ in range(spec.n_gaussians):
        r_major = e * rng.uniform(0.08, 0.22)
        r_minor = r_major * rng.uniform(0.5, 1.0)
        tilt = rng.uniform(0.0, max_tilt)
        az = rng.uniform(0.0, 2 * math.pi)
        n = np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])
        R = _frame_from_normal(n, rng.uniform(0.0, 2 * math.pi))
        xy = rng.uniform(-0.8 * e, 0.8 * e, size=2)
        lift = rng.uniform(0.3, 1.0) * r_major
        means.append([xy[0], xy[1], lift])
        log_scales.append(np.log([r_major, r_minor, 0.15 * r_minor]))
        quats.append(matrix_to_quat(R))
        opac.append(rng.uniform(1.5, 4.0))
        albedo.append(palette[rng.integers(len(palette))])
        normals.append(n)

    gs = Gaussians(np.array(means), np.array(log_scales), np.array(quats), np.array(opac))
    normals = np.asarray(normals, dtype=np.float64)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cams, future = _ring_cameras(spec)
    return Scene(spec, gs, np.asarray(albedo, dtype=np.float64), normals, cams, future)


def scene_records(scene: Scene) -> str:
    """Plain-text export, one primitive per line.

    Columns: mean(3) log_scale(3) quat(4) opacity_logit albedo(3) normal(3).
    """
    gs = scene.gaussians
    lines = [f"# scene seed={scene.spec.seed} n={len(gs)}",
             "# mx my mz lsx lsy lsz qw qx qy qz opacity_logit ar ag ab nx ny nz"]
    for i in range(len(gs)):
        vals = np.concatenate([gs.means[i], gs.log_scales[i], gs.quats[i],
                               [gs.opacity_logits[i]], scene.albedo[i], scene.normals[i]])
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_scene_records(text: str) -> tuple[Gaussians, np.ndarray, np.ndarray]:
    rows = [list(map(float, ln.split())) for ln in text.splitlines()
            if ln.strip() and not ln.startswith("#")]
    a = np.array(rows, dtype=np.float64).reshape(-1, 17)
    gs = Gaussians(a[:, 0:3], a[:, 3:6], a[:, 6:10], a[:, 10])
    return gs, a[:, 11:14], a[:, 14:17]


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)

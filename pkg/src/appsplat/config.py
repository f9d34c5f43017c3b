"""Flat ``section.key = value`` configuration with strict key checking."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .appearance import ModelConfig
from .errors import ConfigError
from .geom import SceneSpec
from .guidance import DenoiserConfig, GuidanceConfig, NoiseSchedule
from .losses import LossWeights, TrainConfig
from .net import spec_hash
from .relight import LightSampling

OUTPUT_ENV = "APPSPLAT_OUTPUT_DIR"


@dataclass(frozen=True)
class SceneSection:
    seed: int = 0
    n_gaussians: int = 32
    extent: float = 1.0
    ground_tiles: int = 0
    n_cameras: int = 3
    cam_radius: float = 3.0
    cam_height: float = 2.0
    width: int = 16
    height: int = 16
    fov_deg: float = 50.0
    max_tilt_deg: float = 60.0


@dataclass(frozen=True)
class ModelSection:
    patch: int = 2
    d_tok: int = 32
    d_img: int = 16
    d_vox: int = 8
    d: int = 8
    phi_hidden: int = 64
    head_hidden: int = 128


@dataclass(frozen=True)
class LossSection:
    lam_m: float = 5.0
    lam_p: float = 0.05
    lam_d: float = 0.05
    lam_s: float = 0.1
    beta1: float = 1.0
    beta2: float = 5.0
    beta3: float = 0.5
    beta4: float = 0.5


@dataclass(frozen=True)
class LightsSection:
    elev_min: float = 20.0
    elev_max: float = 70.0
    intensity_min: float = 0.6
    intensity_max: float = 1.4
    ambient_min: float = 0.05
    ambient_max: float = 0.3


@dataclass(frozen=True)
class GuidanceSection:
    lam: float = 0.7
    sigma: float = 2.0
    T: int = 50
    denoiser_steps: int = 3000
    denoiser_hidden: int = 16
    denoiser_lr: float = 1e-2
    refine_pairs: bool = False


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0
    n_scenes: int = 4
    horizon: int = 4


@dataclass(frozen=True)
class EvalSection:
    n_scenes: int = 4


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "scene": SceneSection, "model": ModelSection, "loss": LossSection, "lights": LightsSection,
    "guidance": GuidanceSection, "train": TrainSection, "eval": EvalSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class Config:
    scene: SceneSection = field(default_factory=SceneSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    lights: LightsSection = field(default_factory=LightsSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- derived objects -------------------------------------------------

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        return SceneSpec(seed=s.seed, n_gaussians=s.n_gaussians, extent=s.extent,
                         ground_tiles=s.ground_tiles, n_cameras=s.n_cameras,
                         cam_radius=s.cam_radius, cam_height=s.cam_height, width=s.width,
                         height=s.height, fov_deg=s.fov_deg, max_tilt_deg=s.max_tilt_deg)

    def model_config(self) -> ModelConfig:
        return ModelConfig(seed=self.train.seed, **_asdict(self.model))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**_asdict(self.loss))

    def light_sampling(self) -> LightSampling:
        s = self.lights
        return LightSampling((s.elev_min, s.elev_max), (s.intensity_min, s.intensity_max),
                             (s.ambient_min, s.ambient_max))

    def train_config(self, threads: int = 1) -> TrainConfig:
        t = self.train
        return TrainConfig(steps=t.steps, lr=t.lr, seed=t.seed, n_scenes=t.n_scenes,
                           weights=self.loss_weights(), lights=self.light_sampling(),
                           threads=threads)

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(lam=self.guidance.lam, sigma=self.guidance.sigma)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.guidance.T)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(hidden=self.guidance.denoiser_hidden, T=self.guidance.T,
                              seed=self.train.seed)

    # -- identity --------------------------------------------------------

    def as_flat(self) -> dict:
        out = {}
        for sec in SECTIONS:
            for k, v in _asdict(getattr(self, sec)).items():
                out[f"{sec}.{k}"] = v
        return out

    def hash(self) -> str:
        """Hash of everything that can change an artifact (not the output dir)."""
        return spec_hash({k: v for k, v in self.as_flat().items() if not k.startswith("output.")})

    def model_hash(self) -> str:
        return spec_hash({"model": self.model_config().to_dict()})

    def validate(self) -> "Config":
        try:
            self.scene_spec().validate()
            self.loss_weights()
            self.guidance_config()
            self.schedule()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        t, m, g, s = self.train, self.model, self.guidance, self.scene
        if t.steps < 0 or t.n_scenes < 1 or t.horizon < 1 or not t.lr >= 0:
            raise ConfigError("train.steps >= 0, train.n_scenes >= 1, train.horizon >= 1, lr >= 0")
        if min(m.patch, m.d_tok, m.d_img, m.d_vox, m.d, m.phi_hidden, m.head_hidden) < 1:
            raise ConfigError("model widths must be >= 1")
        if s.width % m.patch or s.height % m.patch:
            raise ConfigError("scene size must be divisible by model.patch")
        if g.denoiser_steps < 0 or g.denoiser_hidden < 1:
            raise ConfigError("bad denoiser settings")
        if self.eval.n_scenes < 1:
            raise ConfigError("eval.n_scenes must be >= 1")
        l = self.lights
        if not (0 <= l.elev_min <= l.elev_max <= 90 and 0 <= l.intensity_min <= l.intensity_max
                and 0 <= l.ambient_min <= l.ambient_max):
            raise ConfigError("light ranges must be ordered and non-negative")
        return self


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def apply(cfg: Config, pairs: dict) -> Config:
    """Return ``cfg`` with ``{"section.key": "text"}`` overrides applied."""
    updates: dict = {}
    for key, raw in pairs.items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"unknown key {key!r}")
        current = getattr(cfg, sec)
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown key {key!r}")
        updates.setdefault(sec, {})[name] = _coerce(key, raw, getattr(current, name))
    return replace(cfg, **{sec: replace(getattr(cfg, sec), **kv) for sec, kv in updates.items()})


def parse(text: str) -> dict:
    pairs = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in pairs:
            raise ConfigError(f"line {no}: duplicate key {k!r}")
        pairs[k] = v
    return pairs


def load(path=None, overrides: dict | None = None, output_dir: str | None = None) -> Config:
    """Defaults <- file <- overrides; output dir from flag, env, then file."""
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = apply(cfg, parse(fh.read()))
    if overrides:
        cfg = apply(cfg, overrides)
    out = output_dir or os.environ.get(OUTPUT_ENV)
    if out:
        cfg = replace(cfg, output=OutputSection(out))
    return cfg.validate()


def dump(cfg: Config) -> str:
    """Loadable text form; the output directory is left out like in the hash."""
    lines = [f"# config_hash={cfg.hash()}"]
    for k, v in cfg.as_flat().items():
        if not k.startswith("output."):
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"

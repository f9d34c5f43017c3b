"""Training objective and the paired source/augmented training loop.

Both streams share the (ground-truth) geometry of a scene, so every render
is ``W c + (1 - alpha) bg`` with a weight matrix ``W`` fixed per camera.
Photometric terms (mse, aug, swap) are routed through adapted colour
evaluations only; inv and base only through base evaluations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import splat
from ._rng import make_rng
from .appearance import (AppearanceModel, ModelConfig, _accumulate, assign_patches,
                         color_eval, color_eval_backward, factored_color,
                         factored_color_backward)
from .errors import MissingTerm, NonFiniteLoss, ShapeMismatch
from .geom import Scene, SceneSpec, generate_scene, with_seed
from .net import AdamState, adam_step, sigmoid
from .relight import LightSampling, PairedSample, make_pair, render_intrinsics, sample_light_pair

TERMS = ("mse", "lpips", "dyn", "depth", "inv", "aug", "swap", "base")
INACTIVE = ("lpips", "dyn")   # carried for completeness, always multiplied by 0
REQUIRED = tuple(t for t in TERMS if t not in INACTIVE)


@dataclass(frozen=True)
class LossWeights:
    lam_m: float = 5.0
    lam_p: float = 0.05
    lam_d: float = 0.05
    lam_s: float = 0.1
    beta1: float = 1.0
    beta2: float = 5.0
    beta3: float = 0.5
    beta4: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0")

    def of(self, term: str) -> float:
        return {"mse": self.lam_m, "lpips": self.lam_p, "dyn": self.lam_d, "depth": self.lam_s,
                "inv": self.beta1, "aug": self.beta2, "swap": self.beta3, "base": self.beta4}[term]

    def active(self, term: str) -> bool:
        return term not in INACTIVE and self.of(term) > 0


# ---------------------------------------------------------------------------
# scalar losses


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b) -> np.ndarray:
    """``d mse(a, b) / d a``."""
    a = np.asarray(a, dtype=np.float64)
    return 2.0 * (a - b) / a.size


def loss_inv(base_src, base_aug) -> float:
    return mse(base_src, base_aug)


def loss_aug(ada_aug, target_aug) -> float:
    return mse(ada_aug, target_aug)


def loss_base(base_src, albedo) -> float:
    return mse(base_src, albedo)


def loss_swap(direction: int, cross_renders, targets) -> float:
    """``targets = (I_src, I_aug)``.

    Direction 0 renders augmented features with the source embedding (target
    ``I_src``); direction 1 renders source features with the augmented
    embedding (target ``I_aug``).
    """
    if direction not in (0, 1):
        raise ValueError("swap direction must be 0 or 1")
    return mse(cross_renders, targets[direction])


class SwapCoin:
    """Dedicated RNG stream for the per-step swap direction."""

    def __init__(self, seed: int):
        self._rng = make_rng(seed, "swap")

    def flip(self) -> int:
        return int(self._rng.integers(2))


@dataclass
class LossBreakdown:
    total: float
    terms: dict
    weighted: dict
    active: dict


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum; lpips and dyn may be omitted and never contribute."""
    missing = [t for t in REQUIRED if t not in terms]
    if missing:
        raise MissingTerm(f"missing loss terms: {', '.join(missing)}")
    raw = {t: float(terms.get(t, 0.0)) for t in TERMS}
    weighted = {t: (0.0 if t in INACTIVE else weights.of(t) * raw[t]) for t in TERMS}
    total = 0.0
    for t in REQUIRED:
        total += weighted[t]
    return LossBreakdown(total, raw, weighted, {t: weights.active(t) for t in TERMS})


# ---------------------------------------------------------------------------
# per-scene precomputation


@dataclass
class SceneData:
    """Geometry-side quantities that stay fixed while the colour model trains."""

    scene: Scene
    cameras: list        # ring cameras then the future camera
    n_ring: int
    rasters: list
    W_ring: np.ndarray   # (K*H*W, N) stacked ring weights
    a_ring: np.ndarray
    W_all: np.ndarray    # ring + future
    a_all: np.ndarray
    maps: list
    patch_idx: np.ndarray
    gt_depth: np.ndarray  # (n_cams, H, W)

    @property
    def image_shape(self) -> tuple:
        return self.rasters[0].shape


def prepare_scene(scene: Scene, patch: int, threads: int = 1) -> SceneData:
    cams = scene.all_cameras
    rasters = [splat.rasterize(scene.gaussians, c, threads=threads) for c in cams]
    K = len(scene.cameras)
    maps = [render_intrinsics(scene, c, raster=r) for c, r in zip(cams, rasters)]
    W_all = np.concatenate([r.W for r in rasters], axis=0)
    a_all = np.concatenate([r.alpha for r in rasters])
    n_ring = K * rasters[0].W.shape[0]
    return SceneData(scene, cams, K, rasters, W_all[:n_ring], a_all[:n_ring], W_all, a_all, maps,
                     assign_patches(scene.gaussians, cams[0], patch),
                     np.stack([r.depth() for r in rasters]))


def scene_pair(sd: SceneData, light_src, light_aug, refine=None) -> PairedSample:
    return make_pair(sd.scene, sd.cameras, light_src, light_aug, maps=sd.maps, refine=refine)


# ---------------------------------------------------------------------------
# one training step


@dataclass
class LossReport:
    step: int
    breakdown: LossBreakdown
    direction: int

    @property
    def total(self) -> float:
        return self.breakdown.total


def _render(W, alpha, colors, bg):
    return W @ colors + (1.0 - alpha)[:, None] * bg[None, :]


def _flat(images):
    return np.asarray(images, dtype=np.float64).reshape(-1, 3)


def forward_terms(model: AppearanceModel, sd: SceneData, pair: PairedSample, direction: int,
                  with_grads: bool = True):
    """Loss terms (and, optionally, parameter gradients) for one pair.

    ``direction`` selects the swap branch (see :func:`loss_swap`).
    """
    P, cfg = model.params, model.cfg
    K = sd.n_ring
    src = model.stream(pair.src[:K], sd.patch_idx)
    aug = model.stream(pair.aug[:K], sd.patch_idx)
    cs, cache_s = factored_color(src.feat, src.a, P, cfg)
    ca, cache_a = factored_color(aug.feat, aug.a, P, cfg)
    if direction == 0:
        c_x, cache_x = color_eval(aug.feat, src.a, P, cfg)
    else:
        c_x, cache_x = color_eval(src.feat, aug.a, P, cfg)
    bg = sigmoid(P["bg"])

    t_src_all, t_src, t_aug = _flat(pair.src), _flat(pair.src[:K]), _flat(pair.aug[:K])
    t_alb = _flat(pair.albedo[:K])
    r_ada_src = _render(sd.W_all, sd.a_all, cs.c_ada, bg)
    r_base_src = _render(sd.W_ring, sd.a_ring, cs.c_base, bg)
    r_base_aug = _render(sd.W_ring, sd.a_ring, ca.c_base, bg)
    r_ada_aug = _render(sd.W_ring, sd.a_ring, ca.c_ada, bg)
    r_cross = _render(sd.W_ring, sd.a_ring, c_x, bg)
    depth = np.stack([r.depth() for r in sd.rasters])

    terms = {
        "mse": mse(r_ada_src, t_src_all),
        "depth": mse(depth, sd.gt_depth),
        "inv": loss_inv(r_base_src, r_base_aug),
        "aug": loss_aug(r_ada_aug, t_aug),
        "swap": loss_swap(direction, r_cross, (t_src, t_aug)),
        "base": loss_base(r_base_src, t_alb),
    }
    if not with_grads:
        return terms, None
    return terms, (src, aug, cs, ca, cache_s, cache_a, c_x, cache_x, bg,
                   r_ada_src, r_base_src, r_base_aug, r_ada_aug, r_cross,
                   t_src_all, t_src, t_aug, t_alb)


def backward_terms(model: AppearanceModel, sd: SceneData, direction: int, weights: LossWeights,
                   fw) -> dict:
    (src, aug, cs, ca, cache_s, cache_a, c_x, cache_x, bg,
     r_ada_src, r_base_src, r_base_aug, r_ada_aug, r_cross,
     t_src_all, t_src, t_aug, t_alb) = fw
    Wr, ar, Wa, aa = sd.W_ring, sd.a_ring, sd.W_all, sd.a_all

    g_ada_src = weights.lam_m * mse_grad(r_ada_src, t_src_all)
    g_inv = weights.beta1 * mse_grad(r_base_src, r_base_aug)
    g_base_src = g_inv + weights.beta4 * mse_grad(r_base_src, t_alb)
    g_base_aug = -g_inv
    g_ada_aug = weights.beta2 * mse_grad(r_ada_aug, t_aug)
    g_cross = weights.beta3 * mse_grad(r_cross, t_src if direction == 0 else t_aug)

    d_bg = ((1.0 - aa) @ g_ada_src + (1.0 - ar) @ (g_base_src + g_base_aug + g_ada_aug + g_cross))
    gb_s, ga_s = factored_color_backward(cache_s, Wr.T @ g_base_src, Wa.T @ g_ada_src)
    gb_a, ga_a = factored_color_backward(cache_a, Wr.T @ g_base_aug, Wr.T @ g_ada_aug)
    gx, dfeat_x, da_x = color_eval_backward(cache_x, Wr.T @ g_cross)

    grads = {}
    for g in (gb_s.params, ga_s.params, gb_a.params, ga_a.params, gx):
        _accumulate(grads, g)
    dfeat_s = gb_s.d_feat + ga_s.d_feat
    dfeat_a = gb_a.d_feat + ga_a.d_feat
    da_s = ga_s.d_a.copy()
    da_a = ga_a.d_a.copy()
    if direction == 0:
        dfeat_a = dfeat_a + dfeat_x
        da_s += da_x
    else:
        dfeat_s = dfeat_s + dfeat_x
        da_a += da_x
    _accumulate(grads, model.stream_backward(src, dfeat_s, da_s))
    _accumulate(grads, model.stream_backward(aug, dfeat_a, da_a))
    grads["bg"] = d_bg * bg * (1.0 - bg)
    for k, v in model.params.items():
        grads.setdefault(k, np.zeros_like(v))
    return grads


def train_step(model: AppearanceModel, sd: SceneData, pair: PairedSample, opt: AdamState,
               weights: LossWeights = LossWeights(), direction: int = 0, step: int = 0):
    """Forward both streams, backprop the weighted objective, one Adam step.

    Returns ``(new_model, LossReport)``; ``model`` itself is not modified.
    """
    terms, fw = forward_terms(model, sd, pair, direction)
    bd = total_loss(terms, weights)
    if not math.isfinite(bd.total):
        bad = [k for k, v in bd.terms.items() if not math.isfinite(v)]
        raise NonFiniteLoss(f"step {step}: non-finite loss terms {bad}")
    grads = backward_terms(model, sd, direction, weights, fw)
    new = AppearanceModel(model.cfg, adam_step(opt, model.params, grads), model.context)
    return new, LossReport(step, bd, direction)


def loss_csv_header() -> str:
    return ",".join(["step", "total", *TERMS, "direction", *[f"active_{t}" for t in TERMS]])


def loss_csv_row(rep: LossReport) -> str:
    b = rep.breakdown
    cells = [str(rep.step), repr(b.total)] + [repr(b.terms[t]) for t in TERMS]
    cells.append(str(rep.direction))
    cells += [str(int(b.active[t])) for t in TERMS]
    return ",".join(cells)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0
    n_scenes: int = 4
    weights: LossWeights = LossWeights()
    lights: LightSampling = LightSampling()
    threads: int = 1


@dataclass
class TrainResult:
    model: AppearanceModel
    reports: list
    scenes: list
    opt: AdamState = field(default=None)


def train_scene_seeds(spec: SceneSpec, n: int) -> list[int]:
    return [spec.seed + i for i in range(n)]


def heldout_scene_seeds(spec: SceneSpec, n: int) -> list[int]:
    return [spec.seed + 1000 + i for i in range(n)]


def train(spec: SceneSpec, model_cfg: ModelConfig, tcfg: TrainConfig, scenes=None,
          callback=None, refine=None) -> TrainResult:
    """Cycle over ``n_scenes`` training scenes with fresh light pairs per step.

    ``refine`` is forwarded to :func:`scene_pair` for every relit image.
    """
    if scenes is None:
        scenes = [prepare_scene(generate_scene(with_seed(spec, s)), model_cfg.patch, tcfg.threads)
                  for s in train_scene_seeds(spec, tcfg.n_scenes)]
    model = AppearanceModel(model_cfg)
    opt = AdamState(lr=tcfg.lr)
    light_rng = make_rng(tcfg.seed, "lights")
    coin = SwapCoin(tcfg.seed)
    reports = []
    for step in range(tcfg.steps):
        sd = scenes[step % len(scenes)]
        pair = scene_pair(sd, *sample_light_pair(light_rng, tcfg.lights), refine=refine)
        model, rep = train_step(model, sd, pair, opt, tcfg.weights, coin.flip(), step)
        reports.append(rep)
        if callback is not None:
            callback(rep)
    return TrainResult(model, reports, scenes, opt)


def eval_inv(model: AppearanceModel, sd: SceneData, pair: PairedSample) -> float:
    """Unweighted L_inv for one pair without taking a step."""
    return forward_terms(model, sd, pair, 0, with_grads=False)[0]["inv"]

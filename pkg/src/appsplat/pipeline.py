"""End-to-end routines shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import guidance as G
from ._rng import make_rng
from .appearance import AppearanceModel
from .config import Config
from .evaluate import base_renders, cross_appearance_eval, lowfreq_disagreement, reprojected_pairs
from .geom import generate_scene, with_seed
from .history import consistency_stream, drifting_lights
from .losses import (SceneData, TrainResult, heldout_scene_seeds, prepare_scene, scene_pair, train,
                     train_scene_seeds)
from .relight import lambertian_relight, sample_light, sample_light_pair


def scenes_for(cfg: Config, seeds, threads: int = 1) -> list[SceneData]:
    spec = cfg.scene_spec()
    return [prepare_scene(generate_scene(with_seed(spec, s)), cfg.model.patch, threads)
            for s in seeds]


def training_scenes(cfg: Config, threads: int = 1) -> list[SceneData]:
    return scenes_for(cfg, train_scene_seeds(cfg.scene_spec(), cfg.train.n_scenes), threads)


def heldout_scenes(cfg: Config, threads: int = 1) -> list[SceneData]:
    return scenes_for(cfg, heldout_scene_seeds(cfg.scene_spec(), cfg.eval.n_scenes), threads)


def heldout_pairs(cfg: Config, scenes: list[SceneData]) -> list:
    """One light pair per held-out scene from the evaluation stream."""
    rng = make_rng(cfg.train.seed, "eval")
    ls = cfg.light_sampling()
    return [scene_pair(sd, *sample_light_pair(rng, ls)) for sd in scenes]


def train_model(cfg: Config, threads: int = 1, scenes=None, callback=None,
                denoiser=None) -> TrainResult:
    """Train with the config; optionally routes pairs through guided refinement."""
    if scenes is None:
        scenes = training_scenes(cfg, threads)
    refine = None
    if cfg.guidance.refine_pairs:
        den = denoiser if denoiser is not None else fit_denoiser(cfg, scenes).params
        refine = guided_refiner(cfg, den)
    return train(cfg.scene_spec(), cfg.model_config(), cfg.train_config(threads), scenes,
                 callback, refine)


def guided_refiner(cfg: Config, den_params):
    """``refine(image, view, light)`` running guided DDIM from fresh noise."""
    sched, gcfg = cfg.schedule(), cfg.guidance_config()
    fn = G.make_denoiser(den_params, sched)
    noise = make_rng(cfg.train.seed, "noise")

    def refine(img, i, light):
        return G.refine_view(fn, img, noise.standard_normal(img.shape), sched, gcfg)

    return refine


# ---------------------------------------------------------------------------
# evaluation studies


@dataclass
class CrossStudy:
    rows: list            # per scene: list of four MetricRow
    matched: tuple        # (src row, aug row) mean matched PSNR
    swapped: tuple        # (src-geom/aug-emb, aug-geom/src-emb) mean swapped PSNR
    swapped_other: tuple  # swapped renders scored against the mismatched ground truth
    base_delta: float     # mean |base_src - base_aug|
    base_albedo: float    # mean |base_src - albedo|


def cross_study(model: AppearanceModel, scenes, pairs) -> CrossStudy:
    rows = [cross_appearance_eval(model, sd, p) for sd, p in zip(scenes, pairs)]
    m = lambda i, attr="psnr": float(np.mean([getattr(r[i], attr) for r in rows]))
    deltas, alb = [], []
    for sd, p in zip(scenes, pairs):
        bs, ba = base_renders(model, sd, p)
        deltas.append(float(np.mean(np.abs(bs - ba))))
        alb.append(float(np.mean(np.abs(bs - p.albedo))))
    return CrossStudy(rows, (m(0), m(3)), (m(1), m(2)), (m(1, "psnr_other"), m(2, "psnr_other")),
                      float(np.mean(deltas)), float(np.mean(alb)))


def history_study(model: AppearanceModel, cfg: Config, scenes, n_steps: int = 8):
    """Pooled per-frame age variance with and without recompute.

    Each scene gets an illumination drift between two lights drawn from the
    training light distribution.
    """
    rng = make_rng(cfg.train.seed, "eval")
    rec, lock = [], []
    for sd in scenes:
        a, b = sample_light_pair(rng, cfg.light_sampling())
        tr = consistency_stream(model, sd, drifting_lights(a, b, n_steps), cfg.train.horizon)
        rec += tr.recompute
        lock += tr.locked
    return float(np.mean(rec)), float(np.mean(lock))


def fit_denoiser(cfg: Config, scenes, lights_per_scene: int = 8) -> G.DenoiserTraining:
    """Toy denoiser on Lambertian renders of ``scenes`` under random lights."""
    rng = make_rng(cfg.train.seed, "lights")
    data = []
    for sd in scenes:
        for _ in range(lights_per_scene):
            light = sample_light(rng, cfg.light_sampling())
            data += [G.to_latent(lambertian_relight(m, light, c.R))
                     for m, c in zip(sd.maps, sd.cameras)]
    return G.train_toy_denoiser(data, cfg.guidance.denoiser_steps, cfg.denoiser_config(),
                                lr=cfg.guidance.denoiser_lr)


@dataclass
class GuidedStudy:
    n_pairs: int
    unguided: float        # low-band disagreement between the two views, lam = 0
    guided: float          # same with the configured lam
    reference: float       # disagreement of the physics references themselves
    results: dict          # lam -> (view a, view b) DDIMResult
    references: tuple

    def latents(self, lam: float) -> tuple:
        return tuple(r.z0 for r in self.results[lam])


def guided_study(cfg: Config, den_params, sd: SceneData, views=(0, 1), seed: int = 0) -> GuidedStudy:
    """Refine two views of one scene with and without guidance.

    Both runs share the denoiser and the per-view starting noise; agreement
    is measured on the low band of the sampled latents at depth-reprojected
    pixel pairs.
    """
    sched = cfg.schedule()
    den = G.make_denoiser(den_params, sched)
    light = sample_light(make_rng(seed, "eval"), cfg.light_sampling())
    va, vb = views
    refs = tuple(lambertian_relight(sd.maps[v], light, sd.cameras[v].R) for v in views)
    pairs = reprojected_pairs(sd.rasters[va], sd.rasters[vb])
    noise = make_rng(seed, "noise")
    z_T = [noise.standard_normal(refs[0].shape) for _ in views]
    sigma = cfg.guidance.sigma
    lows = [G.lowpass(G.to_latent(r), sigma)[0] for r in refs]
    res = {}
    for lam in (0.0, cfg.guidance.lam):
        gcfg = G.GuidanceConfig(lam=lam, sigma=sigma)
        res[lam] = tuple(G.ddim_sample(den, sched, z, gcfg, lo) for z, lo in zip(z_T, lows))
    lat = {lam: tuple(r.z0 for r in rs) for lam, rs in res.items()}
    ref_lat = tuple(G.to_latent(r) for r in refs)
    return GuidedStudy(len(pairs), lowfreq_disagreement(*lat[0.0], pairs, sigma),
                       lowfreq_disagreement(*lat[cfg.guidance.lam], pairs, sigma),
                       lowfreq_disagreement(*ref_lat, pairs, sigma), res, refs)

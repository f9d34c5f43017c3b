"""Shared fixtures: the default training run, its ablations and the toy denoiser.

Training runs are session-scoped so the acceptance suite and the module tests
that need a trained model pay for each run once.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from appsplat import config as C
from appsplat import pipeline as P

ACCEPTANCE: dict = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    """Register one acceptance outcome; printed at the end of the session."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def fd_relerr(fd, an) -> float:
    """Norm-wise relative error between finite-difference and analytic vectors."""
    fd, an = np.ravel(fd), np.ravel(an)
    den = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
    return float(np.linalg.norm(fd - an) / den)


@pytest.fixture(scope="session")
def cfg():
    return C.Config()


@pytest.fixture(scope="session")
def trained(cfg):
    t = time.perf_counter()
    res = P.train_model(cfg)
    res.seconds = time.perf_counter() - t
    return res


@pytest.fixture(scope="session")
def heldout(cfg):
    scenes = P.heldout_scenes(cfg)
    return scenes, P.heldout_pairs(cfg, scenes)


def _ablation(cfg, trained, **loss):
    abl = replace(cfg, loss=replace(cfg.loss, **loss))
    return P.train_model(abl, scenes=trained.scenes)


@pytest.fixture(scope="session")
def no_swap(cfg, trained):
    return _ablation(cfg, trained, beta3=0.0)


@pytest.fixture(scope="session")
def no_base(cfg, trained):
    return _ablation(cfg, trained, beta4=0.0)


@pytest.fixture(scope="session")
def denoiser(cfg, trained):
    return P.fit_denoiser(cfg, trained.scenes)


def small_splat_scene(seed: int, n: int = 3):
    """A few random Gaussians in front of a 16x16 identity-pose camera."""
    from appsplat.geom import Camera, Gaussians

    rng = np.random.default_rng(seed)
    means = np.c_[rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(2.5, 3.5, n)]
    gs = Gaussians(means, np.log(rng.uniform(0.1, 0.3, (n, 3))), rng.normal(size=(n, 4)),
                   rng.uniform(-1, 2, n))
    cam = Camera(20, 20, 7.5, 7.5, 16, 16)
    return gs, rng.uniform(0, 1, (n, 3)), cam


def splat_fd_errors(seed: int, backend: str, h: float = 1e-4) -> dict:
    """Relative error of every rasterizer gradient against central differences."""
    from appsplat import splat

    gs, col, cam = small_splat_scene(seed)
    bg = np.array([0.2, 0.3, 0.4])
    rng = np.random.default_rng(100 + seed)
    g_rgb, g_dep, g_alp = (rng.normal(size=s) for s in ((16, 16, 3), (16, 16), (16, 16)))

    def loss(gs_, col_=col, bg_=bg):
        out = splat.render(gs_, col_, cam, bg_, backend=backend)
        return np.sum(g_rgb * out.rgb) + np.sum(g_dep * out.depth) + np.sum(g_alp * out.alpha)

    gr = splat.render_backward(gs, col, cam, bg, g_rgb, d_depth=g_dep, d_alpha=g_alp,
                               backend=backend)
    errs = {}
    for name, attr, an in (("mean", "means", gr.mean), ("log_scale", "log_scales", gr.log_scale),
                           ("rotation", "quats", gr.rotation),
                           ("opacity", "opacity_logits", gr.opacity_logit)):
        arr = getattr(gs, attr)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            gp, gm = gs.copy(), gs.copy()
            getattr(gp, attr)[idx] += h
            getattr(gm, attr)[idx] -= h
            fd[idx] = (loss(gp) - loss(gm)) / (2 * h)
        errs[name] = fd_relerr(fd, an)
    fd = np.zeros_like(col)
    for idx in np.ndindex(col.shape):
        cp, cm = col.copy(), col.copy()
        cp[idx] += h
        cm[idx] -= h
        fd[idx] = (loss(gs, cp) - loss(gs, cm)) / (2 * h)
    errs["color"] = fd_relerr(fd, gr.color)
    fd = np.zeros(3)
    for k in range(3):
        bp, bm = bg.copy(), bg.copy()
        bp[k] += h
        bm[k] -= h
        fd[k] = (loss(gs, col, bp) - loss(gs, col, bm)) / (2 * h)
    errs["background"] = fd_relerr(fd, gr.background)
    return errs


def mlp_fd_errors(seed: int, h: float = 1e-5) -> dict:
    """Three-layer GELU/LayerNorm MLP: every parameter and the input."""
    from appsplat.net import MLPSpec, Params, init_mlp, mlp_backward, mlp_forward

    rng = np.random.default_rng(seed)
    spec = MLPSpec((5, 7, 6, 3), ("gelu", "gelu", "none"), ("layernorm", "layernorm", "none"), seed)
    p = init_mlp(spec)
    for k in p:
        p[k] = p[k] + 0.1 * rng.normal(size=p[k].shape)
    x = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 3))
    f = lambda P, X: float(np.sum(g * mlp_forward(spec, P, X)[0]))
    _, cache = mlp_forward(spec, p, x)
    grads, dx = mlp_backward(cache, g)
    errs = {}
    for k, v in p.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            q = Params(p)
            q[k] = v.copy()
            q[k][idx] += h
            fp = f(q, x)
            q[k][idx] -= 2 * h
            fd[idx] = (fp - f(q, x)) / (2 * h)
        errs[k] = fd_relerr(fd, grads[k])
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (f(p, xp) - f(p, xm)) / (2 * h)
    errs["x"] = fd_relerr(fd, dx)
    return errs


def model_fd_errors(seed: int, entries: int = 4, h: float = 1e-6) -> dict:
    """Sampled central differences of the full weighted objective.

    Covers every parameter tensor (token map, projection, phi, colour head,
    background) through both colour streams and both swap directions.
    """
    from appsplat import losses as L
    from appsplat.appearance import AppearanceModel, ModelConfig
    from appsplat.geom import SceneSpec, generate_scene
    from appsplat.net import Params
    from appsplat.relight import sample_light_pair

    cfg = ModelConfig(seed=seed)
    sd = L.prepare_scene(generate_scene(SceneSpec(seed=seed, n_gaussians=12)), cfg.patch)
    rng = np.random.default_rng(seed)
    pair = L.scene_pair(sd, *sample_light_pair(rng))
    model = AppearanceModel(cfg)
    w = L.LossWeights()
    errs = {}
    for d in (0, 1):
        _, fw = L.forward_terms(model, sd, pair, d)
        g = L.backward_terms(model, sd, d, w, fw)

        def f(params):
            terms = L.forward_terms(AppearanceModel(cfg, params), sd, pair, d, False)[0]
            return L.total_loss(terms, w).total

        for k, val in model.params.items():
            idx = rng.choice(val.size, min(entries, val.size), replace=False)
            fd = []
            for j in idx:
                q = Params(model.params)
                q[k] = val.copy()
                q[k].flat[j] += h
                lp = f(q)
                q[k].flat[j] -= 2 * h
                fd.append((lp - f(q)) / (2 * h))
            errs[f"{k}/dir{d}"] = fd_relerr(fd, g[k].flat[idx])
    return errs

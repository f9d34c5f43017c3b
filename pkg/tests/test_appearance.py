import numpy as np
import pytest

from appsplat.appearance import (AppearanceModel, GaussianFeatures, ModelConfig, assign_patches,
                                 color_eval, color_eval_backward, encode_appearance,
                                 encode_appearance_backward, export_embeddings_csv,
                                 extract_tokens, factored_color, factored_color_backward,
                                 init_params, patchify, view_features, view_features_backward)
from appsplat.errors import EmptyCameraSet, SizeMismatch, WidthMismatch
from appsplat.geom import SceneSpec, generate_scene
from appsplat.net import Params
from conftest import fd_relerr, model_fd_errors

CFG = ModelConfig(d_tok=6, d_img=5, d_vox=3, d=4, phi_hidden=7, head_hidden=9)


def _params(seed=0, cfg=CFG):
    p = init_params(ModelConfig(**{**cfg.to_dict(), "seed": seed}))
    rng = np.random.default_rng(seed)
    for k in p:
        p[k] = p[k] + 0.1 * rng.normal(size=p[k].shape)
    return p


def _feat(n, rng, cfg=CFG):
    return GaussianFeatures(rng.normal(size=(n, cfg.d_vox)), rng.normal(size=(n, cfg.d_img)))


def test_constant_image_gives_identical_tokens():
    p = _params()
    p["tok.b"] = np.zeros(CFG.d_tok)
    tok, _ = extract_tokens(np.full((2, 8, 8, 3), 0.37), p, 2)
    np.testing.assert_array_equal(tok, np.broadcast_to(tok[0, 0], tok.shape))


def test_zero_image_zero_tokens():
    p = _params()
    p["tok.b"] = np.zeros(CFG.d_tok)
    tok, _ = extract_tokens(np.zeros((1, 4, 6, 3)), p, 2)
    np.testing.assert_array_equal(tok, 0.0)


def test_tokens_match_patch_matmul_oracle():
    rng = np.random.default_rng(1)
    p = _params(1)
    img = rng.uniform(size=(2, 4, 6, 3))
    tok, _ = extract_tokens(img, p, 2)
    for k in range(2):
        n = 0
        for py in range(2):
            for px in range(3):
                flat = img[k, 2 * py:2 * py + 2, 2 * px:2 * px + 2, :].reshape(-1)
                np.testing.assert_allclose(tok[k, n], flat @ p["tok.W"] + p["tok.b"], rtol=1e-13)
                n += 1


def test_patchify_rejects_bad_sizes():
    with pytest.raises(SizeMismatch):
        patchify(np.zeros((1, 5, 4, 3)), 2)
    with pytest.raises(SizeMismatch):
        extract_tokens([np.zeros((4, 4, 3)), np.zeros((6, 4, 3))], _params(), 2)


def _phi_oracle(x, p):
    """Straight-line phi: (linear, layernorm, gelu) x2 then linear."""
    from math import erf, sqrt

    gelu = np.vectorize(lambda v: 0.5 * v * (1 + erf(v / sqrt(2))))
    h = x
    for i in range(2):
        z = h @ p[f"phi.{i}.W"] + p[f"phi.{i}.b"]
        z = (z - z.mean()) / np.sqrt(z.var() + 1e-5) * p[f"phi.{i}.gain"] + p[f"phi.{i}.offset"]
        h = gelu(z)
    return h @ p["phi.2.W"] + p["phi.2.b"]


def test_single_token_embedding_is_phi():
    p = _params(2)
    t = np.random.default_rng(2).normal(size=(1, 1, CFG.d_tok))
    a, _ = encode_appearance(t, p, CFG)
    np.testing.assert_allclose(a, _phi_oracle(t[0, 0], p), rtol=1e-12)


def test_duplicate_cameras_do_not_change_embedding():
    p = _params(3)
    t = np.random.default_rng(3).normal(size=(1, 5, CFG.d_tok))
    a1, _ = encode_appearance(t, p, CFG)
    a2, _ = encode_appearance(np.concatenate([t, t]), p, CFG)
    np.testing.assert_allclose(a1, a2, rtol=1e-14)


def test_pooled_mlp_oracle():
    p = _params(4)
    t = np.random.default_rng(4).normal(size=(3, 7, CFG.d_tok))
    a, _ = encode_appearance(t, p, CFG)
    ref = np.mean([_phi_oracle(t[k].mean(axis=0), p) for k in range(3)], axis=0)
    np.testing.assert_allclose(a, ref, rtol=1e-12)


def test_empty_camera_set():
    with pytest.raises(EmptyCameraSet):
        encode_appearance(np.zeros((0, 4, CFG.d_tok)), _params(), CFG)


def test_zero_embedding_base_equals_adapted():
    rng = np.random.default_rng(5)
    pair, _ = factored_color(_feat(11, rng), np.zeros(CFG.d), _params(5), CFG)
    np.testing.assert_array_equal(pair.c_base, pair.c_ada)


def test_zero_features_give_half_grey():
    p = init_params(CFG)
    feat = GaussianFeatures(np.zeros((4, CFG.d_vox)), np.zeros((4, CFG.d_img)))
    pair, _ = factored_color(feat, np.zeros(CFG.d), p, CFG)
    np.testing.assert_array_equal(pair.c_base, 0.5)


def test_head_matches_dense_oracle():
    rng = np.random.default_rng(6)
    p = _params(6)
    feat, a = _feat(5, rng), rng.normal(size=CFG.d)
    c, _ = color_eval(feat, a, p, CFG)
    x = np.concatenate([feat.z_vox, feat.z_img, np.tile(a, (5, 1))], axis=1)
    h = np.maximum(x @ p["head.0.W"] + p["head.0.b"], 0)
    np.testing.assert_allclose(c, 1 / (1 + np.exp(-(h @ p["head.1.W"] + p["head.1.b"]))), rtol=1e-13)


def test_width_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(WidthMismatch):
        color_eval(_feat(3, rng), np.zeros(CFG.d + 1), _params(), CFG)


def test_base_only_gradient_has_no_embedding_gradient():
    rng = np.random.default_rng(7)
    _, cache = factored_color(_feat(6, rng), rng.normal(size=CFG.d), _params(7), CFG)
    gb, ga = factored_color_backward(cache, d_base=rng.normal(size=(6, 3)))
    assert not np.any(gb.d_a) and not np.any(ga.d_a)


def test_adapted_embedding_gradient_finite_differences():
    rng = np.random.default_rng(8)
    p, feat, a = _params(8), _feat(6, rng), rng.normal(size=CFG.d)
    g = rng.normal(size=(6, 3))
    _, cache = factored_color(feat, a, p, CFG)
    _, ga = factored_color_backward(cache, d_ada=g)
    h, fd = 1e-6, np.zeros(CFG.d)
    for i in range(CFG.d):
        ap, am = a.copy(), a.copy()
        ap[i] += h
        am[i] -= h
        fd[i] = (np.sum(g * factored_color(feat, ap, p, CFG)[0].c_ada)
                 - np.sum(g * factored_color(feat, am, p, CFG)[0].c_ada)) / (2 * h)
    assert fd_relerr(fd, ga.d_a) < 1e-4


def test_shared_parameter_gradients_add():
    rng = np.random.default_rng(9)
    p, feat, a = _params(9), _feat(6, rng), rng.normal(size=CFG.d)
    db, da = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    _, cache = factored_color(feat, a, p, CFG)
    gb, ga = factored_color_backward(cache, db, da)
    gb_only = color_eval_backward(cache.base, db)[0]
    ga_only = color_eval_backward(cache.ada, da)[0]
    for k in gb.params:
        np.testing.assert_allclose(gb.params[k] + ga.params[k], gb_only[k] + ga_only[k], rtol=1e-14)


def test_view_feature_backward_finite_differences():
    rng = np.random.default_rng(10)
    p = _params(10)
    tok = rng.normal(size=(8, CFG.d_tok))
    idx = rng.integers(0, 8, size=13)
    g = rng.normal(size=(13, CFG.d_img))
    _, cache = view_features(tok, idx, p)
    _, d_tok = view_features_backward(cache, p, g)
    h, fd = 1e-6, np.zeros_like(tok)
    for j in np.ndindex(tok.shape):
        tp, tm = tok.copy(), tok.copy()
        tp[j] += h
        tm[j] -= h
        fd[j] = (np.sum(g * view_features(tp, idx, p)[0]) - np.sum(g * view_features(tm, idx, p)[0])) / (2 * h)
    assert fd_relerr(fd, d_tok) < 1e-6


def test_embedding_backward_finite_differences():
    rng = np.random.default_rng(11)
    p = _params(11)
    tok = rng.normal(size=(3, 4, CFG.d_tok))
    g = rng.normal(size=CFG.d)
    _, cache = encode_appearance(tok, p, CFG)
    grads, d_tok = encode_appearance_backward(cache, g)
    h, fd = 1e-6, np.zeros_like(tok)
    for j in np.ndindex(tok.shape):
        tp, tm = tok.copy(), tok.copy()
        tp[j] += h
        tm[j] -= h
        fd[j] = (g @ encode_appearance(tp, p, CFG)[0] - g @ encode_appearance(tm, p, CFG)[0]) / (2 * h)
    assert fd_relerr(fd, d_tok) < 1e-4


def test_full_model_finite_differences():
    errs = model_fd_errors(0)
    assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])


def test_assign_patches_in_range():
    s = generate_scene(SceneSpec(seed=0))
    idx = assign_patches(s.gaussians, s.cameras[0], 2)
    assert idx.min() >= 0 and idx.max() < 64


def test_model_embed_and_colors():
    cfg = ModelConfig()
    m = AppearanceModel(cfg)
    s = generate_scene(SceneSpec(seed=0))
    imgs = np.random.default_rng(0).uniform(size=(3, 16, 16, 3))
    st = m.stream(imgs, assign_patches(s.gaussians, s.cameras[0], 2))
    np.testing.assert_array_equal(st.a, m.embed(imgs))
    c = m.colors(st.feat, st.a)
    assert c.shape == (len(s.gaussians), 3) and np.all((c > 0) & (c < 1))
    np.testing.assert_array_equal(m.background, 0.5)


def test_embedding_csv():
    text = export_embeddings_csv([("s0", np.array([0.5, -1.0]))], "config_hash=x")
    assert text.splitlines() == ["# config_hash=x", "tag,a0,a1", "s0,0.5,-1.0"]


def test_init_is_seeded():
    a, b = init_params(ModelConfig(seed=1)), init_params(ModelConfig(seed=1))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["tok.W"], init_params(ModelConfig(seed=2))["tok.W"])
    assert isinstance(a, Params)

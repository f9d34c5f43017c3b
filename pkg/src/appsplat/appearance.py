"""Global appearance embedding and factored base/adapted colour prediction.

The colour head ``f`` is evaluated twice per Gaussian with the same weights::

    c_base = sigmoid(f([z_vox; z_img; 0]))
    c_ada  = sigmoid(f([z_vox; z_img; a]))

where ``a`` is a scene-wide embedding obtained by mean-pooling per-camera patch
tokens, encoding each camera with ``phi`` and averaging over cameras.  Patch
tokens come from a learned linear map over non-overlapping ``P x P`` patches
(a small stand-in for a pretrained ViT backbone).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import make_rng
from .errors import EmptyCameraSet, SizeMismatch, StaleCache, WidthMismatch
from .geom import Camera, Gaussians
from .net import MLPSpec, Params, init_mlp, mlp_backward, mlp_forward, sigmoid


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 2
    d_tok: int = 32
    d_img: int = 16
    d_vox: int = 8
    d: int = 8
    phi_hidden: int = 64
    head_hidden: int = 128
    seed: int = 0

    @property
    def phi_spec(self) -> MLPSpec:
        return MLPSpec((self.d_tok, self.phi_hidden, self.phi_hidden, self.d),
                       ("gelu", "gelu", "none"), ("layernorm", "layernorm", "none"), self.seed)

    @property
    def head_spec(self) -> MLPSpec:
        return MLPSpec((self.d_vox + self.d_img + self.d, self.head_hidden, 3),
                       ("relu", "none"), ("none", "none"), self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SCALE_DIMS = dict(d_tok=2048, d_img=256, d_vox=32, d=64, phi_hidden=256, head_hidden=128)


# ---------------------------------------------------------------------------
# tokens


@dataclass
class TokenCache:
    patches: np.ndarray   # (K*Np, P*P*3)
    params: Params
    version: int


def patchify(images, patch: int) -> np.ndarray:
    """``(K, H, W, 3)`` -> ``(K, Np, P*P*3)`` non-overlapping patches, row-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise SizeMismatch("images must be (K, H, W, 3)")
    K, H, W, _ = images.shape
    if H % patch or W % patch:
        raise SizeMismatch(f"image size {H}x{W} not divisible by patch {patch}")
    x = images.reshape(K, H // patch, patch, W // patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(K, (H // patch) * (W // patch), patch * patch * 3)


def extract_tokens(images, params: Params, patch: int):
    """Linear patch embedding; returns ``(tokens (K, Np, D_tok), cache)``."""
    if isinstance(images, (list, tuple)):
        if len({np.shape(im) for im in images}) > 1:
            raise SizeMismatch("all camera images must share one size")
        images = np.stack(images) if images else np.zeros((0, patch, patch, 3))
    P = patchify(images, patch)
    K, Np, F = P.shape
    flat = P.reshape(K * Np, F)
    tokens = flat @ params["tok.W"] + params["tok.b"]
    return tokens.reshape(K, Np, -1), TokenCache(flat, params, params.version)


def extract_tokens_backward(cache: TokenCache, d_tokens) -> dict:
    if cache.params.version != cache.version:
        raise StaleCache("token extractor parameters changed")
    g = np.asarray(d_tokens).reshape(cache.patches.shape[0], -1)
    return {"tok.W": cache.patches.T @ g, "tok.b": g.sum(axis=0)}


# ---------------------------------------------------------------------------
# global embedding


@dataclass
class EmbedCache:
    mlp: object
    shape: tuple


def encode_appearance(tokens, params: Params, cfg: ModelConfig):
    """``a = mean_k phi(mean_n f_{k,n})``; returns ``(a, cache)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[0] == 0:
        raise EmptyCameraSet("need at least one camera of tokens")
    pooled = tokens.mean(axis=1)
    a_k, mc = mlp_forward(cfg.phi_spec, params, pooled, prefix="phi.")
    return a_k.mean(axis=0), EmbedCache(mc, tokens.shape)


def encode_appearance_backward(cache: EmbedCache, d_a):
    K, Np, _ = cache.shape
    d_ak = np.broadcast_to(np.asarray(d_a) / K, (K, len(d_a)))
    grads, d_pooled = mlp_backward(cache.mlp, d_ak)
    d_tokens = np.repeat(d_pooled[:, None, :] / Np, Np, axis=1)
    return grads, d_tokens


# ---------------------------------------------------------------------------
# per-Gaussian view features


def assign_patches(gs: Gaussians, cam: Camera, patch: int) -> np.ndarray:
    """Index of the patch each Gaussian mean falls into for ``cam``.

    Means outside the image are clamped to the nearest border patch.
    """
    t = gs.means @ cam.R.T + cam.translation
    z = np.maximum(t[:, 2], cam.near)
    u = cam.fx * t[:, 0] / z + cam.cx
    v = cam.fy * t[:, 1] / z + cam.cy
    nw, nh = cam.width // patch, cam.height // patch
    px = np.clip(np.floor((u + 0.5) / patch), 0, nw - 1).astype(np.int64)
    py = np.clip(np.floor((v + 0.5) / patch), 0, nh - 1).astype(np.int64)
    return py * nw + px


@dataclass
class FeatureCache:
    x: np.ndarray
    patch_idx: np.ndarray
    n_tokens: int
    version: int


def view_features(ref_tokens, patch_idx, params: Params):
    """``z_img = proj([token of own patch; mean token of the view])``.

    The pooled half gives each Gaussian the global context a ViT token would
    carry.
    """
    ref_tokens = np.asarray(ref_tokens)
    ctx = np.broadcast_to(ref_tokens.mean(axis=0), (len(patch_idx), ref_tokens.shape[1]))
    x = np.concatenate([ref_tokens[patch_idx], ctx], axis=1)
    z = x @ params["proj.W"] + params["proj.b"]
    return z, FeatureCache(x, np.asarray(patch_idx), ref_tokens.shape[0], params.version)


def view_features_backward(cache: FeatureCache, params: Params, d_z):
    if params.version != cache.version:
        raise StaleCache("feature projection parameters changed")
    grads = {"proj.W": cache.x.T @ d_z, "proj.b": d_z.sum(axis=0)}
    d_x = d_z @ params["proj.W"].T
    D = d_x.shape[1] // 2
    d_tok = np.zeros((cache.n_tokens, D))
    np.add.at(d_tok, cache.patch_idx, d_x[:, :D])
    d_tok += d_x[:, D:].sum(axis=0) / cache.n_tokens
    return grads, d_tok


# ---------------------------------------------------------------------------
# factored colour


@dataclass
class GaussianFeatures:
    z_vox: np.ndarray  # (N, D_vox)
    z_img: np.ndarray  # (N, D_img)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.z_vox, self.z_img], axis=1)


@dataclass
class ColorPair:
    c_base: np.ndarray
    c_ada: np.ndarray


@dataclass
class ColorCache:
    mlp: object
    c: np.ndarray
    n_feat: int


def color_eval(feat: GaussianFeatures, a, params: Params, cfg: ModelConfig):
    """One evaluation ``sigmoid(f([z_vox; z_img; a]))``; returns ``(c, cache)``."""
    x = feat.stacked()
    a = np.asarray(a, dtype=np.float64)
    if x.shape[1] != cfg.d_vox + cfg.d_img or a.shape != (cfg.d,):
        raise WidthMismatch(f"features {x.shape[1]} / embedding {a.shape} do not match head")
    inp = np.concatenate([x, np.broadcast_to(a, (len(x), cfg.d))], axis=1)
    logits, mc = mlp_forward(cfg.head_spec, params, inp, prefix="head.")
    c = sigmoid(logits)
    return c, ColorCache(mc, c, x.shape[1])


def color_eval_backward(cache: ColorCache, d_c):
    """Returns ``(param grads, d_feat (N, Dv+Di), d_a (d,))``."""
    d_logits = np.asarray(d_c) * cache.c * (1.0 - cache.c)
    grads, d_in = mlp_backward(cache.mlp, d_logits)
    return grads, d_in[:, :cache.n_feat], d_in[:, cache.n_feat:].sum(axis=0)


@dataclass
class PairCache:
    base: ColorCache
    ada: ColorCache


@dataclass
class StreamGrads:
    params: dict
    d_feat: np.ndarray
    d_a: np.ndarray


def factored_color(feat: GaussianFeatures, a, params: Params, cfg: ModelConfig):
    """Base (zero embedding) and adapted colours from one shared head."""
    c_base, cb = color_eval(feat, np.zeros(cfg.d), params, cfg)
    c_ada, ca = color_eval(feat, a, params, cfg)
    return ColorPair(c_base, c_ada), PairCache(cb, ca)


def factored_color_backward(cache: PairCache, d_base=None, d_ada=None):
    """Per-stream gradients; the base stream never reports a gradient for ``a``."""
    out = []
    for c, d, is_base in ((cache.base, d_base, True), (cache.ada, d_ada, False)):
        if d is None:
            d = np.zeros_like(c.c)
        grads, d_feat, d_a = color_eval_backward(c, d)
        out.append(StreamGrads(grads, d_feat, np.zeros_like(d_a) if is_base else d_a))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# the whole appearance model


def init_params(cfg: ModelConfig) -> Params:
    rng = make_rng(cfg.seed, "init")
    p = Params()
    fin = cfg.patch * cfg.patch * 3
    b = np.sqrt(6.0 / fin)
    p["tok.W"] = rng.uniform(-b, b, size=(fin, cfg.d_tok))
    p["tok.b"] = np.zeros(cfg.d_tok)
    b = np.sqrt(6.0 / (2 * cfg.d_tok))
    p["proj.W"] = rng.uniform(-b, b, size=(2 * cfg.d_tok, cfg.d_img))
    p["proj.b"] = np.zeros(cfg.d_img)
    p.update(init_mlp(cfg.phi_spec, "phi.", rng))
    p.update(init_mlp(cfg.head_spec, "head.", rng))
    p["bg"] = np.zeros(3)   # background logits
    return p


def zero_context(n: int, cfg: ModelConfig) -> np.ndarray:
    """Default voxel-context provider: no scaffold, zero features."""
    return np.zeros((n, cfg.d_vox))


@dataclass
class StreamState:
    """Everything one image stream produces before colour evaluation."""

    tokens: np.ndarray
    a: np.ndarray
    feat: GaussianFeatures
    tok_cache: TokenCache
    emb_cache: EmbedCache
    feat_cache: FeatureCache


@dataclass
class AppearanceModel:
    cfg: ModelConfig
    params: Params = None
    context: object = field(default=zero_context)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg)

    @property
    def background(self) -> np.ndarray:
        return sigmoid(self.params["bg"])

    def stream(self, images, patch_idx, ref: int = 0) -> StreamState:
        """Tokens, embedding and per-Gaussian features for one set of views."""
        tokens, tc = extract_tokens(images, self.params, self.cfg.patch)
        a, ec = encode_appearance(tokens, self.params, self.cfg)
        z_img, fc = view_features(tokens[ref], patch_idx, self.params)
        feat = GaussianFeatures(self.context(len(patch_idx), self.cfg), z_img)
        return StreamState(tokens, a, feat, tc, ec, fc)

    def stream_backward(self, st: StreamState, d_feat, d_a, ref: int = 0) -> dict:
        """Chain feature and embedding gradients back to extractor parameters."""
        grads = {}
        d_tokens = np.zeros_like(st.tokens)
        if d_feat is not None:
            g, d_ref = view_features_backward(st.feat_cache, self.params, d_feat[:, self.cfg.d_vox:])
            _accumulate(grads, g)
            d_tokens[ref] += d_ref
        if d_a is not None:
            g, d_tok_a = encode_appearance_backward(st.emb_cache, d_a)
            _accumulate(grads, g)
            d_tokens += d_tok_a
        _accumulate(grads, extract_tokens_backward(st.tok_cache, d_tokens))
        return grads

    def embed(self, images) -> np.ndarray:
        tokens, _ = extract_tokens(images, self.params, self.cfg.patch)
        return encode_appearance(tokens, self.params, self.cfg)[0]

    def colors(self, feat: GaussianFeatures, a) -> np.ndarray:
        return color_eval(feat, a, self.params, self.cfg)[0]


def _accumulate(into: dict, g: dict) -> None:
    for k, v in g.items():
        if k in into:
            into[k] = into[k] + v
        else:
            into[k] = v


def export_embeddings_csv(rows, header_comment: str = "") -> str:
    """``rows``: iterable of ``(tag, a)``; one CSV line per scene/timestep."""
    rows = list(rows)
    d = len(rows[0][1]) if rows else 0
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append(",".join(["tag"] + [f"a{i}" for i in range(d)]))
    for tag, a in rows:
        lines.append(",".join([str(tag)] + [repr(float(x)) for x in a]))
    return "\n".join(lines) + "\n"

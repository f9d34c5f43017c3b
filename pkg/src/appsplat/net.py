"""Small dense networks with hand-derived backward passes, Adam, checkpoints.

Tensors are plain float64 numpy arrays.  A model's parameters live in one flat
:class:`Params` mapping (``"phi.0.W"`` style names) so a single Adam state and
a single checkpoint cover every sub-network.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ._rng import make_rng
from .errors import ShapeMismatch, SpecHashMismatch, StaleCache

ACTIVATIONS = ("relu", "gelu", "sigmoid", "none")
NORMS = ("layernorm", "none")
LN_EPS = 1e-5


class Params(dict):
    """Name -> array mapping with a version counter bumped on every update."""

    def __init__(self, *args, version: int = 0, **kw):
        super().__init__(*args, **kw)
        self.version = version

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.items()}, version=self.version)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.items()}


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple            # (in, hidden..., out)
    activations: tuple       # one per layer
    norms: tuple = ()        # one per layer; empty means no normalisation
    seed: int = 0

    def __post_init__(self):
        nl = len(self.widths) - 1
        if nl < 1 or any(w < 1 for w in self.widths):
            raise ValueError("MLP needs >= 1 layer and positive widths")
        norms = self.norms or ("none",) * nl
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "norms", tuple(norms))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.activations) != nl or len(self.norms) != nl:
            raise ValueError("need one activation and one norm per layer")
        if not set(self.activations) <= set(ACTIVATIONS) or not set(self.norms) <= set(NORMS):
            raise ValueError("unknown activation or norm")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(spec: MLPSpec, prefix: str = "", rng=None) -> Params:
    """Kaiming-uniform weights, zero biases, unit LayerNorm gain."""
    rng = rng if rng is not None else make_rng(spec.seed, "init")
    p = Params()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = math.sqrt(6.0 / fan_in)
        p[f"{prefix}{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        p[f"{prefix}{i}.b"] = np.zeros(fan_out)
        if spec.norms[i] == "layernorm":
            p[f"{prefix}{i}.gain"] = np.ones(fan_out)
            p[f"{prefix}{i}.offset"] = np.zeros(fan_out)
    return p


# ---------------------------------------------------------------------------
# elementwise pieces


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def activate(kind: str, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "gelu":
        return gelu(z)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def activate_backward(kind: str, z, y, dy):
    if kind == "relu":
        return dy * (z > 0)
    if kind == "gelu":
        return dy * gelu_grad(z)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


def layernorm(z, gain, offset):
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    inv = 1.0 / np.sqrt((zc * zc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = zc * inv
    return xhat * gain + offset, (xhat, inv)


def layernorm_backward(cache, gain, dy):
    xhat, inv = cache
    dxhat = dy * gain
    red = tuple(range(dy.ndim - 1))
    d_gain = np.sum(dy * xhat, axis=red)
    d_offset = np.sum(dy, axis=red)
    dz = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dz, d_gain, d_offset


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MLPCache:
    spec: MLPSpec
    params: Params
    prefix: str
    version: int
    squeeze: bool
    layers: list = field(default_factory=list)


def mlp_forward(spec: MLPSpec, params: Params, x, prefix: str = ""):
    """Forward pass; returns ``(y, cache)``.  ``x`` is ``(in,)`` or ``(B, in)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.widths[0]:
        raise ShapeMismatch(f"input width {h.shape[-1]} != {spec.widths[0]}")
    cache = MLPCache(spec, params, prefix, params.version, squeeze)
    for i in range(spec.n_layers):
        z = h @ params[f"{prefix}{i}.W"] + params[f"{prefix}{i}.b"]
        ln = None
        if spec.norms[i] == "layernorm":
            z_pre = z
            z, ln = layernorm(z, params[f"{prefix}{i}.gain"], params[f"{prefix}{i}.offset"])
        else:
            z_pre = z
        y = activate(spec.activations[i], z)
        cache.layers.append((h, z_pre, ln, z, y))
        h = y
    return (h[0] if squeeze else h), cache


def mlp_backward(cache: MLPCache, dy):
    """Exact gradients ``(dparams, dx)`` for a cached forward pass."""
    p = cache.params
    if p.version != cache.version:
        raise StaleCache("parameters changed since the forward pass")
    spec, pre = cache.spec, cache.prefix
    g = np.asarray(dy, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads = {}
    for i in reversed(range(spec.n_layers)):
        h, z_pre, ln, z, y = cache.layers[i]
        g = activate_backward(spec.activations[i], z, y, g)
        if ln is not None:
            g, grads[f"{pre}{i}.gain"], grads[f"{pre}{i}.offset"] = layernorm_backward(
                ln, p[f"{pre}{i}.gain"], g)
        grads[f"{pre}{i}.W"] = h.T @ g
        grads[f"{pre}{i}.b"] = g.sum(axis=0)
        g = g @ p[f"{pre}{i}.W"].T
    return grads, (g[0] if cache.squeeze else g)


# ---------------------------------------------------------------------------
# 3x3 convolution ('same' zero padding), used by the toy denoiser


def _im2col(x, k: int):
    """``(H, W, C)`` -> ``(H*W, k*k*C)`` patches with zero padding."""
    H, W, C = x.shape
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    cols = np.empty((H, W, k, k, C))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[dy:dy + H, dx:dx + W, :]
    return cols.reshape(H * W, k * k * C)


def _col2im(cols, shape, k: int):
    H, W, C = shape
    r = k // 2
    cols = cols.reshape(H, W, k, k, C)
    xp = np.zeros((H + 2 * r, W + 2 * r, C))
    for dy in range(k):
        for dx in range(k):
            xp[dy:dy + H, dx:dx + W, :] += cols[:, :, dy, dx, :]
    return xp[r:r + H, r:r + W, :]


def conv2d(x, Wk, b):
    """``x (H, W, Cin)``, ``Wk (k, k, Cin, Cout)`` -> ``(H, W, Cout)``."""
    k = Wk.shape[0]
    cols = _im2col(x, k)
    y = cols @ Wk.reshape(-1, Wk.shape[-1]) + b
    return y.reshape(x.shape[0], x.shape[1], -1), cols


def conv2d_backward(x_shape, cols, Wk, dy):
    k = Wk.shape[0]
    g = dy.reshape(-1, Wk.shape[-1])
    dW = (cols.T @ g).reshape(Wk.shape)
    db = g.sum(axis=0)
    dx = _col2im(g @ Wk.reshape(-1, Wk.shape[-1]).T, x_shape, k)
    return dx, dW, db


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: Params, grads: dict) -> Params:
    """One bias-corrected Adam update; returns new params, mutates ``state``.

    Parameters without a gradient entry are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = Params(params, version=params.version + 1)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"APSPLCK\x00"
CKPT_VERSION = 1


def spec_hash(obj) -> str:
    """SHA-256 of a JSON-serialisable model description."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: Params, shash: str) -> None:
    """Little-endian float32 tensors with a version tag and spec hash."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    buf += shash.encode("ascii").ljust(64, b"\x00")[:64]
    buf += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name])
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[Params, str]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (ver,) = struct.unpack_from("<I", data, 8)
    if ver != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ver}")
    shash = data[12:76].rstrip(b"\x00").decode("ascii")
    if expected_hash is not None and shash != expected_hash:
        raise SpecHashMismatch(f"checkpoint spec hash {shash[:12]} != config {expected_hash[:12]}")
    (n,) = struct.unpack_from("<I", data, 76)
    off = 80
    params = Params()
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        params[name] = arr.reshape(shape)
    return params, shash

"""Frequency-aware guidance for deterministic DDIM sampling.

At every step the clean-image estimate is split into a low band (Gaussian
blur) and a high band.  The low band is pulled towards a physics-based
reference with weight ``w(t) = lam * t / T``::

    x0_tilde = (1 - w) G(x0_hat) + w ref_low + (x0_hat - G(x0_hat))

and the noise is recomputed from ``x0_tilde`` so the update stays on the
deterministic (eta = 0) trajectory.  Everything runs in pixel space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from ._rng import make_rng
from .errors import AlphaBarOne, EmptyDataset, ShapeMismatch
from .net import AdamState, Params, adam_step, conv2d, conv2d_backward


# ---------------------------------------------------------------------------
# spectral split


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalised taps over ``[-r, r]`` with ``r = ceil(3 sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    r = math.ceil(3.0 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(z, sigma: float) -> np.ndarray:
    """Separable blur over the two leading (spatial) axes, reflect padding."""
    z = np.asarray(z, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    # scipy's 'mirror' is numpy's 'reflect': the edge sample is not repeated
    out = correlate1d(z, k, axis=0, mode="mirror")
    return correlate1d(out, k, axis=1, mode="mirror")


def lowpass(z, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """``(z_low, z_high)`` with ``z_high = z - z_low``.

    The blur runs on ``z`` minus its first sample so a constant field maps
    to itself. The larger of the two components is kept as computed and
    the smaller one is recovered by subtraction; that subtraction is exact
    (and ``z_low + z_high == z`` bitwise) unless both components are much
    larger than ``z`` itself.
    """
    z = np.asarray(z, dtype=np.float64)
    c = z.reshape(-1, *z.shape[2:])[0] if z.size else 0.0
    b = c + blur(z - c, sigma)
    r = z - b
    low = np.where(np.abs(b) >= np.abs(r), b, z - r)
    return low, z - low


# ---------------------------------------------------------------------------
# schedule and single-step algebra


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[0] = 1`` and ``alpha_bar[T]`` is small.

    Betas span ``[1e-4, 0.02]`` of a 1000-step schedule, rescaled by
    ``1000 / T`` so short schedules still reach a nearly pure-noise end.
    """

    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def betas(self) -> np.ndarray:
        s = 1000.0 / self.T
        return np.linspace(self.beta_start * s, min(self.beta_end * s, 0.999), self.T)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 0.7
    sigma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


def weight(t: int, T: int, lam: float) -> float:
    return lam * t / T


def estimate_x0(z_t, eps, alpha_bar: float) -> np.ndarray:
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)


def guided_x0(x0_hat, ref_low, t: int, T: int, cfg: GuidanceConfig) -> np.ndarray:
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if ref_low is None:
        return x0_hat
    ref_low = np.asarray(ref_low, dtype=np.float64)
    if ref_low.shape != x0_hat.shape:
        raise ShapeMismatch(f"reference {ref_low.shape} vs estimate {x0_hat.shape}")
    w = weight(t, T, cfg.lam)
    if w == 0.0:
        return x0_hat
    low, high = lowpass(x0_hat, cfg.sigma)
    return ((1.0 - w) * low + w * ref_low) + high


def recompute_noise(z_t, x0_tilde, alpha_bar: float) -> np.ndarray:
    if alpha_bar >= 1.0:
        raise AlphaBarOne("noise is undefined at alpha_bar = 1")
    return (z_t - math.sqrt(alpha_bar) * x0_tilde) / math.sqrt(1.0 - alpha_bar)


# ---------------------------------------------------------------------------
# sampler


@dataclass
class StepRecord:
    t: int
    w: float
    alpha_bar: float
    residual: float   # max |z_t - (sqrt(ab) x0_tilde + sqrt(1-ab) eps_tilde)|


@dataclass
class DDIMResult:
    z0: np.ndarray
    steps: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)


def ddim_sample(denoiser, schedule: NoiseSchedule, z_T, cfg: GuidanceConfig = GuidanceConfig(),
                ref_low=None, keep_trajectory: bool = False) -> DDIMResult:
    """Deterministic DDIM from ``z_T``; ``denoiser(z, t)`` predicts the noise.

    Steps with ``w(t) = 0`` (or no reference) take the vanilla update, so
    ``lam = 0`` reproduces unguided sampling bitwise.
    """
    ab = schedule.alpha_bar
    T = schedule.T
    z = np.asarray(z_T, dtype=np.float64).copy()
    res = DDIMResult(z)
    if keep_trajectory:
        res.trajectory.append(z.copy())
    for t in range(T, 0, -1):
        eps = denoiser(z, t)
        x0 = estimate_x0(z, eps, ab[t])
        w = weight(t, T, cfg.lam) if ref_low is not None else 0.0
        if w != 0.0:
            x0 = guided_x0(x0, ref_low, t, T, cfg)
            eps = recompute_noise(z, x0, ab[t])
        resid = float(np.max(np.abs(z - (math.sqrt(ab[t]) * x0 + math.sqrt(1.0 - ab[t]) * eps))))
        res.steps.append(StepRecord(t, w, float(ab[t]), resid))
        z = math.sqrt(ab[t - 1]) * x0 + math.sqrt(1.0 - ab[t - 1]) * eps
        if keep_trajectory:
            res.trajectory.append(z.copy())
    res.z0 = z
    return res


def w_trace_csv(result: DDIMResult, T: int, lam: float, header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    lines.append("t,w,alpha_bar,residual")
    for s in result.steps:
        lines.append(f"{s.t},{weight(s.t, T, lam)!r},{s.alpha_bar!r},{s.residual!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# toy convolutional noise predictor


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    hidden: int = 16
    T: int = 50
    seed: int = 0


def init_denoiser(cfg: DenoiserConfig) -> Params:
    rng = make_rng(cfg.seed, "denoiser")
    p = Params()
    for name, cin, cout in (("c1", cfg.channels, cfg.hidden), ("c2", cfg.hidden, cfg.hidden),
                            ("c3", cfg.hidden, cfg.channels)):
        b = math.sqrt(6.0 / (9 * cin))
        p[f"{name}.W"] = rng.uniform(-b, b, size=(3, 3, cin, cout))
        p[f"{name}.b"] = np.zeros(cout)
    p["c3.W"] *= 0.1
    p["temb"] = rng.uniform(-1.0, 1.0, size=cfg.hidden)
    return p


def denoiser_forward(params: Params, z, t: int, schedule: NoiseSchedule):
    """Noise prediction through a clean-image head; returns ``(eps, cache)``.

    ``x = sqrt(ab) z + c3(relu(c2(relu(c1(z) + (t/T) temb))))`` and
    ``eps = (z - sqrt(ab) x) / sqrt(1 - ab)``.  Predicting the clean image
    keeps the sampler's early estimates bounded.
    """
    ab = schedule.alpha_bar[t]
    s = t / schedule.T
    h1, cols1 = conv2d(z, params["c1.W"], params["c1.b"])
    h1 = h1 + s * params["temb"]
    a1 = np.maximum(h1, 0.0)
    h2, cols2 = conv2d(a1, params["c2.W"], params["c2.b"])
    a2 = np.maximum(h2, 0.0)
    out, cols3 = conv2d(a2, params["c3.W"], params["c3.b"])
    x = math.sqrt(ab) * z + out
    eps = (z - math.sqrt(ab) * x) / math.sqrt(1.0 - ab)
    return eps, (np.shape(z), s, ab, h1, a1, h2, a2, cols1, cols2, cols3)


def denoiser_backward(params: Params, cache, d_eps) -> dict:
    zshape, s, ab, h1, a1, h2, a2, cols1, cols2, cols3 = cache
    d_out = -math.sqrt(ab) / math.sqrt(1.0 - ab) * np.asarray(d_eps)
    d_a2, dW3, db3 = conv2d_backward(a2.shape, cols3, params["c3.W"], d_out)
    d_h2 = d_a2 * (h2 > 0)
    d_a1, dW2, db2 = conv2d_backward(a1.shape, cols2, params["c2.W"], d_h2)
    d_h1 = d_a1 * (h1 > 0)
    _, dW1, db1 = conv2d_backward(zshape, cols1, params["c1.W"], d_h1)
    return {"c1.W": dW1, "c1.b": db1, "c2.W": dW2, "c2.b": db2, "c3.W": dW3, "c3.b": db3,
            "temb": s * d_h1.sum(axis=(0, 1))}


def make_denoiser(params: Params, schedule: NoiseSchedule):
    """Closure usable as the ``denoiser`` argument of :func:`ddim_sample`."""
    return lambda z, t: denoiser_forward(params, z, t, schedule)[0]


@dataclass
class DenoiserTraining:
    params: Params
    losses: list
    eval_initial: float
    eval_final: float


def _eps_loss(params, batch, schedule):
    ab = schedule.alpha_bar
    tot = 0.0
    for x0, t, eps in batch:
        z = math.sqrt(ab[t]) * x0 + math.sqrt(1.0 - ab[t]) * eps
        pred, _ = denoiser_forward(params, z, t, schedule)
        tot += float(np.mean((pred - eps) ** 2))
    return tot / len(batch)


def train_toy_denoiser(images, steps: int, cfg: DenoiserConfig = DenoiserConfig(),
                       lr: float = 2e-3, eval_size: int = 16) -> DenoiserTraining:
    """Standard epsilon-prediction MSE with Adam, one image per step.

    ``eval_initial`` / ``eval_final`` are the loss on a fixed held batch of
    (image, t, noise) triples before and after training.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise EmptyDataset("denoiser needs at least one training image")
    schedule = NoiseSchedule(cfg.T)
    ab = schedule.alpha_bar
    params = init_denoiser(cfg)
    rng = make_rng(cfg.seed, "noise")
    held = [(images[int(rng.integers(len(images)))], int(rng.integers(1, cfg.T + 1)),
             rng.standard_normal(images[0].shape)) for _ in range(eval_size)]
    initial = _eps_loss(params, held, schedule)
    opt = AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        x0 = images[int(rng.integers(len(images)))]
        t = int(rng.integers(1, cfg.T + 1))
        eps = rng.standard_normal(x0.shape)
        z = math.sqrt(ab[t]) * x0 + math.sqrt(1.0 - ab[t]) * eps
        pred, cache = denoiser_forward(params, z, t, schedule)
        diff = pred - eps
        losses.append(float(np.mean(diff**2)))
        grads = denoiser_backward(params, cache, 2.0 * diff / diff.size)
        params = adam_step(opt, params, grads)
    final = _eps_loss(params, held, schedule) if steps else initial
    return DenoiserTraining(params, losses, initial, final)


def to_latent(image) -> np.ndarray:
    """Pixel-space encoder: ``[0, 1]`` images to ``[-1, 1]`` latents."""
    return 2.0 * np.asarray(image, dtype=np.float64) - 1.0


def from_latent(z) -> np.ndarray:
    return np.clip(0.5 * (np.asarray(z) + 1.0), 0.0, 1.0)


def refine_view(denoiser, reference, z_T, schedule: NoiseSchedule, cfg: GuidanceConfig,
                guided: bool = True) -> np.ndarray:
    """Sample one image guided by the low band of a physics render.

    ``reference`` is a ``[0, 1]`` image; the result is returned in ``[0, 1]``.
    """
    ref_low = lowpass(to_latent(reference), cfg.sigma)[0] if guided else None
    return from_latent(ddim_sample(denoiser, schedule, z_T, cfg, ref_low).z0)

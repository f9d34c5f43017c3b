"""Appearance-disentangled Gaussian splatting at desk scale.

Modules: ``geom`` (cameras, scenes), ``splat`` (differentiable rasterizer),
``net`` (MLPs, Adam), ``appearance`` (embedding and factored colour),
``history`` (recomputed temporal buffer), ``relight`` (Lambertian pairs),
``guidance`` (frequency-guided DDIM), ``losses`` (objective, training),
``evaluate`` (metrics, cross-appearance protocol) and ``cli``.
"""

__version__ = "0.1.0"

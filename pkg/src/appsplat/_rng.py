"""Seeded random streams.

All randomness goes through Philox-4x64 (counter based, platform independent)
keyed by ``(seed, stream)`` so that independent consumers (scene generation,
light sampling, the swap coin, initialisation) never share a sequence.
"""

import numpy as np

STREAMS = {
    "scene": 1,
    "init": 2,
    "lights": 3,
    "swap": 4,
    "noise": 5,
    "denoiser": 6,
    "eval": 7,
}


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, sid])
    return np.random.Generator(np.random.Philox(ss))

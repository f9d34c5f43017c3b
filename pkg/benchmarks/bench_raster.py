"""Time the compiled and pure-numpy rasterizer kernels on synthetic scenes.

Usage: python benchmarks/bench_raster.py [--sizes 16 32 64] [--gaussians 32 128] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace

import numpy as np

from appsplat.geom import SceneSpec, generate_scene
from appsplat.splat import get_backend, rasterize


def _time(fn, repeat: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[32, 128])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    try:
        get_backend("cython")
        backends = ["cython", "numpy"]
    except ImportError:
        backends = ["numpy"]
        print("compiled extension not built; timing numpy only")

    print(f"{'size':>5} {'N':>5} " + " ".join(f"{b + ' ms':>11}" for b in backends)
          + ("   speedup  max|dW|" if len(backends) == 2 else ""))
    for n in args.gaussians:
        for size in args.sizes:
            spec = replace(SceneSpec(seed=0), n_gaussians=n, width=size, height=size)
            scene = generate_scene(spec)
            cam = scene.cameras[0]
            times, Ws = [], []
            for b in backends:
                times.append(_time(lambda: rasterize(scene.gaussians, cam, args.threads, b),
                                   args.repeat))
                Ws.append(rasterize(scene.gaussians, cam, args.threads, b).W)
            row = f"{size:>5} {n:>5} " + " ".join(f"{1e3 * t:>11.2f}" for t in times)
            if len(backends) == 2:
                row += f"   {times[1] / times[0]:>7.1f}x  {np.abs(Ws[0] - Ws[1]).max():.1e}"
            print(row)


if __name__ == "__main__":
    main()

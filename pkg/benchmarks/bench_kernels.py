"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np
import torch

from cellcount import gmp, kernels


def cases(rng):
    n = 600
    xs, ys = rng.uniform(0, 256, n), rng.uniform(0, 256, n)
    radii, soft, amps = rng.uniform(2.5, 4.5, n), rng.uniform(0.4, 1.6, n), rng.uniform(0.6, 1, n)
    dens = kernels.splat_gaussians(np.zeros((256, 256)), xs[:200], ys[:200], 3.0)
    feat = rng.normal(size=(32, 32, 64))
    pos = np.stack([rng.uniform(0, 31, (32, 32, 8)), rng.uniform(0, 31, (32, 32, 8))], -1)
    return {
        "splat_gaussians 600 dots 256x256":
            lambda impl: kernels.splat_gaussians(np.zeros((256, 256)), xs, ys, 3.0, impl=impl),
        "render_soft_disks 600 cells 256x256":
            lambda impl: kernels.render_soft_disks(np.zeros((256, 256)), xs, ys, radii, soft, amps, impl=impl),
        "peak_local_max 256x256":
            lambda impl: kernels.peak_local_max(dens, 3, 1e-3, impl=impl),
        "bilinear_gather 32x32x64 K=8":
            lambda impl: kernels.bilinear_gather(feat, pos, impl=impl),
    }, (feat, pos)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    table, (feat, pos) = cases(np.random.default_rng(0))
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}")
    for name, fn in table.items():
        times = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat))
                 for b, m in backends.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:40s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values()) + f"{speed:9.1f}x")
    # the training path gathers with torch; shown for reference
    x = torch.from_numpy(feat).permute(2, 0, 1)[None].contiguous()
    s = torch.from_numpy(pos)[None]
    t = min(timeit.repeat(lambda: gmp.bilinear_gather(x, s), number=1, repeat=args.repeat))
    print(f"{'torch bilinear_gather (reference)':40s}{t * 1e3:10.2f}ms")


if __name__ == "__main__":
    main()

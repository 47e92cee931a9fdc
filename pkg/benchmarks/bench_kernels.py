"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time per call of each backend
and the speedup. Both backends get identical inputs and their outputs are
checked for equality before timing.
"""
import argparse
import math
import statistics
import time

import numpy as np

from egomem import kernels
from egomem.agent import motion_model, _trav
from egomem.worldgen import generate_environment


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(env, rng):
    x, z, r, _ = env.object_arrays()
    angles = np.linspace(0, 2 * math.pi, 24, endpoint=False)
    res = env.grid_resolution
    trav = _trav(env)
    iz, ix = np.nonzero(trav)
    a, b = rng.choice(len(ix), 2, replace=False)
    cx, cz = (ix[a] + 0.5) * res, (iz[a] + 0.5) * res
    nz, nx = env.occupancy.shape
    xs, zs = rng.uniform(0.0, nx * res, size=64), rng.uniform(0.0, nz * res, size=64)
    mm = motion_model(res)
    return {
        "cast_rays (24 rays)": lambda be: kernels.cast_rays(env.occupancy, res, x, z, r, cx, cz, angles, 8.0,
                                                             backend=be),
        "segments_clear (64 segments)": lambda be: kernels.segments_clear(env.occupancy, res, cx, cz, xs, zs,
                                                                           backend=be),
        "bfs_plan (one path)": lambda be: kernels.bfs_plan(trav, (ix[a], iz[a], 0), (ix[b], iz[b]), mm.fwd_dx,
                                                            mm.fwd_dz, mm.sweep, mm.sweep_len, backend=be),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    env = generate_environment(args.seed)
    print(f"{'kernel':30s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(env, np.random.default_rng(args.seed)).items():
        if not same(fn("python"), fn("compiled")):
            raise SystemExit(f"{name}: backends disagree")
        tp = median_time(lambda: fn("python"), args.repeat)
        tc = median_time(lambda: fn("compiled"), args.repeat)
        print(f"{name:30s} {1e3 * tp:10.3f} {1e3 * tc:12.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()

"""Adaptive E-step throughput: compiled kernel vs numpy fallback.

    python benchmarks/bench_assoc.py [--n 5000 20000 100000] [--levels 2 3] [--repeat 5]
"""

import argparse
import time

import numpy as np

from hgmmreg.assoc import BACKENDS, AssocConfig, associate_adaptive
from hgmmreg.gmmtree import ModelConfig, build_tree
from hgmmreg.io import synthetic_object, unit_normalize


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, nargs="+", default=[5000, 20000, 100000])
    ap.add_argument("--levels", type=int, nargs="+", default=[2, 3])
    ap.add_argument("--lambda-c", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    cloud = unit_normalize(synthetic_object(max(args.n), seed=0))
    print(f"backends: {', '.join(sorted(BACKENDS))}")
    print(f"{'L':>2} {'N':>8} {'backend':>8} {'ms':>9} {'Mpts/s':>8} {'evals/pt':>8} {'speedup':>8}")
    for lvl in args.levels:
        tree = build_tree(cloud.points[:20000], ModelConfig(max_level=lvl))
        for n in args.n:
            pts = cloud.points[:n]
            base = None
            ref = None
            for name in sorted(BACKENDS, key=lambda b: b != "python"):
                cfg = AssocConfig(lambda_c=args.lambda_c, backend=name)
                dt, m = best_of(lambda: associate_adaptive(pts, tree, None, cfg), args.repeat)
                if ref is None:
                    ref = m
                else:
                    # same paths; masses may differ in the last bits (vectorized vs scalar exp)
                    assert ref.evaluations == m.evaluations and np.allclose(ref.m0, m.m0, rtol=1e-12, atol=0)
                base = base or dt
                print(f"{lvl:>2} {n:>8} {name:>8} {1e3 * dt:9.2f} {n / dt / 1e6:8.2f} "
                      f"{m.evaluations / n:8.2f} {base / dt:7.1f}x")


if __name__ == "__main__":
    main()

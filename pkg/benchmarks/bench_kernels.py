"""Compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--points N] [--repeats R] [--scenario linear]
"""

import argparse

from levyipde import bench, kernels
from levyipde.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--nodes", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scenario", help="also time a full backward solve on this scenario")
    args = ap.parse_args()

    rows = bench.kernel_benchmark(args.points, args.nodes, repeats=args.repeats)
    if args.scenario:
        cfg = load_scenario(args.scenario)
        nu = cfg.numerics
        rows += bench.solve_benchmark(cfg.model(), cfg.measure(), nu["k"], cfg.grid(), cfg.x0, nu["n_paths"],
                                      nu["seed"], cfg.basis())
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'benchmark':<20}{'backend':<10}{'seconds':>10}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(f"{r['benchmark']:<20}{r['backend']:<10}{r['seconds']:>10.4f}{r['speedup']:>8.1f}x{r['max_abs_diff']:>11.1e}")


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-Python SGD/GD kernels.

    python benchmarks/bench_kernels.py [--n 80] [--p 40] [--iters 20000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from sgfrisk import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=80)
    ap.add_argument("--p", type=int, default=40)
    ap.add_argument("--iters", type=int, default=20000)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    X = rng.standard_normal((args.n, args.p))
    y = rng.standard_normal(args.n)
    target = rng.standard_normal(args.p)
    b0 = np.zeros(args.p)
    gamma = 0.5 / args.p
    idx = rng.integers(0, args.n, size=(args.iters, args.batch))
    rec = np.arange(0, args.iters + 1, max(1, args.iters // 20))

    backends = kernels.available_backends()
    print(f"n={args.n} p={args.p} iters={args.iters} batch={args.batch}; backends: {', '.join(backends)}")
    print(f"{'kernel':<8}{'backend':<10}{'seconds':>12}{'us/iter':>12}{'speedup':>10}")
    for kernel in ("sgd", "gd"):
        results = {}
        for name in backends:
            if kernel == "sgd":
                fn = lambda: kernels.sgd_path(X, y, b0, idx, gamma, rec, target, backend=name)
            else:
                fn = lambda: kernels.gd_path(X, y, b0, args.iters, gamma, rec, target, backend=name)
            results[name] = best_of(fn, args.repeat)
        base = results["python"][0]
        for name, (sec, out) in results.items():
            print(f"{kernel:<8}{name:<10}{sec:>12.4f}{1e6 * sec / args.iters:>12.2f}{base / sec:>9.1f}x")
        if len(results) == 2:
            a, b = (results[k][1] for k in ("cython", "python"))
            print(f"{'':<8}max rel diff between backends: {np.max(np.abs(a - b) / np.abs(b)):.1e}")


if __name__ == "__main__":
    main()

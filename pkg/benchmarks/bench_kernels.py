"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from flowtune import _pykernels

try:
    from flowtune import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    A = rng.random((400, 4))
    B = rng.random((300, 4))
    ls = np.full(4, 0.3)
    x = rng.random(600)
    y = x + 0.3 * rng.random(600)
    F = rng.random((500, 2))
    mind = np.full(2000, np.inf)
    X = rng.random((2000, 4))
    return {
        "pairwise_dist 400x300x4": lambda m: m.pairwise_dist(A, B),
        "kernel_matrix matern52 400x300": lambda m: m.kernel_matrix(A, B, ls, 2, 1.0),
        "kendall_tau_b n=600": lambda m: m.kendall_tau_b(x, y),
        "nondominated_mask m=500": lambda m: m.nondominated_mask(F),
        "min_dist_update n=2000": lambda m: m.min_dist_update(X, X[0], mind.copy()),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), repeat=args.repeat, number=args.number)) / args.number
        if _ckernels is None:
            print(f"{name:34s} {t_py * 1e3:10.3f} {'-':>10s} {'-':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), repeat=args.repeat, number=args.number)) / args.number
        print(f"{name:34s} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()

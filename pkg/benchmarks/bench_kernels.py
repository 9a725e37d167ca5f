"""Compare the compiled detector kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 20000]

Prints one line per kernel with the best-of-repeat time of each backend,
the speedup, and whether the two backends returned identical results.
"""

import argparse
import sys
import timeit

import numpy as np

from qcdrive.qcd import kernels


def cases(n, rng):
    e = np.abs(rng.normal(0.6, 0.6, n))
    mus, sig = [0.5, 0.9, 0.5, 0.9], [0.6, 0.6, 1.1, 1.1]
    E = np.abs(rng.normal(0.6, 0.6, (512, 256)))
    never = 1e300  # keep every kernel running over the whole input
    return {
        "cusum_run": (lambda k: k.cusum_run(e, 0.59, 0.62, 0.75, 0.85, never)),
        "mcusum_run": (lambda k: k.mcusum_run(e, 0.59, 0.62, mus, sig, never)),
        "glrt_run (cap 200)": (lambda k: k.glrt_run(e[: n // 10], 0.59, 0.62, 0.2, 0.2, 200, never)),
        "cusum_batch 512x256": (lambda k: k.cusum_batch(E, np.zeros(512), 0.59, 0.62, 0.75, 0.85, never)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=20000)
    args = ap.parse_args(argv)
    if kernels.compiled_kernels is None:
        print("compiled kernels are not built (or QCDRIVE_PURE_PYTHON is set); nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':22s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s}  match")
    for name, fn in cases(args.n, rng).items():
        tc = min(timeit.repeat(lambda: fn(kernels.compiled_kernels), number=1, repeat=args.repeat))
        tp = min(timeit.repeat(lambda: fn(kernels.python_kernels), number=1, repeat=args.repeat))
        ok = same(fn(kernels.compiled_kernels), fn(kernels.python_kernels))
        print(f"{name:22s} {tc:10.5f} {tp:10.5f} {tp / tc:8.1f}x  {ok}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from planvmr import _kernels_py

try:
    from planvmr import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    a = rng.integers(0, 50, 400).astype(np.int64)
    b = rng.integers(0, 50, 400).astype(np.int64)
    # a long plateau makes the walks and the expansion scan the whole profile
    sims = np.concatenate([rng.uniform(0.5, 0.9, 5000), [1.0], rng.uniform(0.5, 0.9, 5000)])
    peak = 5000
    return {
        "lcs 400x400": (lambda m, x, y: m.lcs_length(x, y), (a, b), (a.tolist(), b.tolist())),
        "walk_down 10k": (lambda m, s, i: m.walk_down(s, i, 0.3), (sims, peak), (sims.tolist(), peak)),
        "walk_up 10k": (lambda m, s, i: m.walk_up(s, i, 0.3), (sims, peak), (sims.tolist(), peak)),
        "expand_above 10k": (lambda m, s, i: m.expand_above(s, i, 0.3), (sims, peak), (sims.tolist(), peak)),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, (call, c_args, py_args) in cases(rng).items():
        py = best_of(lambda: call(_kernels_py, *py_args), args.repeat)
        if _kernels is None:
            print(f"{name:<18}{py * 1e3:>12.3f}{'n/a':>12}{'':>10}")
            continue
        assert call(_kernels, *c_args) == call(_kernels_py, *py_args), name
        cy = best_of(lambda: call(_kernels, *c_args), args.repeat)
        print(f"{name:<18}{py * 1e3:>12.3f}{cy * 1e3:>12.3f}{py / cy:>9.0f}x")


if __name__ == "__main__":
    main()

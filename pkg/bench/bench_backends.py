"""Time the compiled and pure-numpy tree kernels on the same forests.

Usage: python bench/bench_backends.py [--n 2000] [--p 10] [--trees 100]
"""
import argparse
import time

import numpy as np

from stratcausal import available_backends
from stratcausal.causal_forest import CausalForestParams, _grow_causal
from stratcausal.forest import ForestParams, fit_forest


def timed(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--p", type=int, default=10)
    ap.add_argument("--trees", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()

    rng = np.random.default_rng(0)
    X = rng.standard_normal((a.n, a.p))
    d = 0.3 * X[:, 1] + rng.standard_normal(a.n)
    y = (1 + X[:, 0]) * d + X[:, 2] + rng.standard_normal(a.n)
    yb = (y > np.median(y)).astype(float)

    backends = available_backends()
    print(f"n={a.n} p={a.p} trees={a.trees} backends={backends}")
    print(f"{'task':<16}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    cfp = CausalForestParams(n_trees=a.trees, nuisance=ForestParams(n_trees=4))
    tasks = {
        "regression": lambda b: fit_forest(X, y, "regression", ForestParams(n_trees=a.trees), backend=b),
        "classification": lambda b: fit_forest(X, yb, "classification", ForestParams(n_trees=a.trees), backend=b),
        "causal": lambda b: _grow_causal(X, y - y.mean(), d - d.mean(), cfp, b, 1),
    }
    for name, task in tasks.items():
        times = {}
        outs = {}
        for b in backends:
            times[b], outs[b] = timed(lambda: task(b), a.repeat)
        line = f"{name:<16}" + "".join(f"{times[b]:>11.3f}s" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['cython']:>9.1f}x"
            same = all(np.array_equal(s.feature, t.feature) and np.array_equal(s.threshold, t.threshold)
                       for s, t in zip(outs["cython"].trees, outs["python"].trees))
            line += "  identical" if same else "  DIFFERENT"
        print(line)


if __name__ == "__main__":
    main()

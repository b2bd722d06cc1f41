"""Time the compiled coordinate-descent kernel against the Python fallback.

Run:  python3 benchmarks/bench_kernels.py
"""
import time

import numpy as np

from gfi import _ccd_py

try:
    from gfi import _ccd
except ImportError:
    _ccd = None


def make_instance(rng, n, k):
    W = rng.standard_normal((n, k))
    v = W @ rng.standard_normal(k) + 0.1 * rng.standard_normal(n)
    return W.T @ W, W.T @ v


def bench(kernel, instances, t, reps=3):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        for G, q in instances:
            kernel(G, q, t, np.zeros(q.shape[0]), tol=1e-8, max_cycles=200)
        best = min(best, time.perf_counter() - t0)
    return best / len(instances)


def main():
    rng = np.random.default_rng(0)
    print(f"{'size':>10} {'python':>12} {'compiled':>12} {'speedup':>9}")
    for n, k in [(200, 16), (400, 64), (400, 160)]:
        instances = [make_instance(rng, n, k) for _ in range(20)]
        t = 0.05 * max(np.abs(q).max() for _, q in instances)
        py = bench(_ccd_py.ccd_lasso, instances, t)
        row = f"{n}x{k:<4}"
        if _ccd is None:
            print(f"{row:>10} {py * 1e3:>10.3f}ms {'not built':>12} {'-':>9}")
        else:
            cc = bench(_ccd.ccd_lasso, instances, t)
            print(f"{row:>10} {py * 1e3:>10.3f}ms {cc * 1e3:>10.3f}ms {py / cc:>8.1f}x")


if __name__ == "__main__":
    main()

"""Timing comparison of the two loss-alignment kernels.

Runs the pure numpy implementation against the compiled one (when built) on
a grid of sequence sizes and prints a table plus the max numerical
difference. Usage: python benchmarks/bench_ctc.py [--repeat N]
"""

import argparse
import time

import numpy as np

from signseq import ctc


def make_case(rng, t, u, v):
    logits = rng.normal(size=(t, v))
    logp = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) \
        - logits.max(1, keepdims=True)
    labels = rng.integers(1, v, size=u).astype(np.int64)
    return np.ascontiguousarray(logp), labels


def bench(fn, cases, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for logp, labels in cases:
            fn(logp, labels)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if ctc._kernel is None:
        print("compiled kernel not available; only the numpy path will run")

    rng = np.random.default_rng(0)
    grid = [(20, 5, 13, 64), (50, 10, 13, 32), (100, 20, 30, 16), (300, 50, 30, 4)]
    print(f"{'T':>5} {'U':>4} {'V':>4} {'n':>4} {'numpy (ms)':>12} {'compiled (ms)':>14} {'speedup':>8}")
    for t, u, v, n in grid:
        cases = [make_case(rng, t, u, v) for _ in range(n)]
        py = bench(ctc.forward_backward_python, cases, args.repeat)
        if ctc._kernel is not None:
            cy = bench(ctc.forward_backward_cython, cases, args.repeat)
            diff = 0.0
            for logp, labels in cases:
                l1, g1 = ctc.forward_backward_python(logp, labels)
                l2, g2 = ctc.forward_backward_cython(logp, labels)
                diff = max(diff, abs(l1 - l2), float(np.abs(g1 - g2).max()))
            print(f"{t:>5} {u:>4} {v:>4} {n:>4} {py * 1e3:>12.2f} {cy * 1e3:>14.2f} "
                  f"{py / cy:>7.1f}x  max|diff|={diff:.2e}")
        else:
            print(f"{t:>5} {u:>4} {v:>4} {n:>4} {py * 1e3:>12.2f} {'-':>14} {'-':>8}")


if __name__ == "__main__":
    main()

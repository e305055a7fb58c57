#!/usr/bin/env python3
"""Microbenchmarks of the hot kernels: compiled extension vs numpy fallback.

Usage: python benchmarks/bench_backends.py [--repeats N]

Also times one short training run with the backend selected at import
(set FAIRMP_NO_EXT=1 to force the fallback for an end-to-end comparison).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fairmp import _numpy_core

try:
    from fairmp import _speedups
except ImportError:
    _speedups = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def random_csr(rng, n, avg_degree):
    pairs_per_row = rng.poisson(avg_degree, size=n) + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(pairs_per_row, out=indptr[1:])
    indices = rng.integers(0, n, size=indptr[-1]).astype(np.int64)
    data = rng.normal(size=indptr[-1])
    return indptr, indices, data


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    cases = []
    for n, deg, cols in ((2_000, 10, 16), (20_000, 5, 2)):
        indptr, indices, data = random_csr(rng, n, deg)
        dense = np.ascontiguousarray(rng.normal(size=(n, cols)))
        cases.append((f"csr_matmat n={n} deg~{deg} cols={cols}",
                      "csr_matmat", (indptr, indices, data, dense)))
    for n, d in ((400, 2), (2_000, 16)):
        pts = np.ascontiguousarray(rng.normal(size=(n, d)))
        cases.append((f"pairwise_sq_dists n={n} d={d}",
                      "pairwise_sq_dists", (pts,)))
    a = np.ascontiguousarray(rng.normal(size=(1_000, 8)))
    b = np.ascontiguousarray(rng.normal(size=(3_000, 8)))
    cases.append(("cross_sq_dists 1000x3000 d=8", "cross_sq_dists", (a, b)))

    print(f"{'kernel':42s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for label, name, argv in cases:
        slow = timeit(lambda: getattr(_numpy_core, name)(*argv),
                      args.repeats)
        if _speedups is None:
            print(f"{label:42s} {slow * 1e3:9.2f}ms {'n/a':>10s}")
            continue
        fast = timeit(lambda: getattr(_speedups, name)(*argv), args.repeats)
        ref = np.asarray(getattr(_numpy_core, name)(*argv))
        out = np.asarray(getattr(_speedups, name)(*argv))
        assert np.allclose(ref, out, atol=1e-10), f"mismatch in {name}"
        print(f"{label:42s} {slow * 1e3:9.2f}ms {fast * 1e3:9.2f}ms "
              f"{slow / fast:7.2f}x")

    from fairmp import backend
    from fairmp.model import TrainConfig, train
    from fairmp.propagation import PropagationConfig
    from fairmp.synth import biased_graph

    graph = biased_graph(n_per_group=250, seed=0)
    prop = PropagationConfig(variant="gmmd_s", k=2, lambda_f=500.0,
                             alpha=0.3, sample_size=50)
    cfg = TrainConfig(prop=prop, epochs=50, seed=0)
    start = time.perf_counter()
    train(graph, cfg)
    elapsed = time.perf_counter() - start
    print(f"\nend-to-end: 50 epochs on 500 nodes with backend="
          f"{backend.BACKEND_NAME}: {elapsed:.2f}s "
          f"(set FAIRMP_NO_EXT=1 to compare the fallback)")


if __name__ == "__main__":
    main()

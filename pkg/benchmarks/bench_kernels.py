"""Compare the numba and numpy paths of the metric and clustering kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Results are checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ovmlc import kernels as K


def cases(rng):
    n = 20_000
    scores = np.round(rng.standard_normal(n), 3)
    truth = rng.random(n) < 0.2
    order = np.argsort(-scores, kind="stable")
    s_desc, t_desc = scores[order], truth[order]
    pos, neg = np.sort(scores[truth]), np.sort(scores[~truth])
    grid = np.unique(scores)
    x = rng.standard_normal((2_000, 32))
    cents = x[rng.choice(len(x), 40, replace=False)]
    return {
        "tie_group_counts": (K.tie_group_counts_numba, K.tie_group_counts_numpy, (s_desc, t_desc)),
        "counts_at_thresholds": (K.counts_at_thresholds_numba, K.counts_at_thresholds_numpy, (pos, neg, grid)),
        "assign_clusters": (K.assign_clusters_numba, K.assign_clusters_numpy, (x, cents)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, ref, inputs) in cases(rng).items():
        a, b = fast(*inputs), ref(*inputs)
        for u, v in zip(a, b):
            if isinstance(u, float):
                assert np.isclose(u, v, rtol=1e-9), name
            else:
                assert np.array_equal(u, v), name
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_ref = min(timeit.repeat(lambda: ref(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:24s} {t_fast:10.3f} {t_ref:10.3f} {t_ref / t_fast:8.2f}x")


if __name__ == "__main__":
    main()

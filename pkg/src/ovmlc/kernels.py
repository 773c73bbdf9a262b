"""Hot loops with a numba implementation and a pure-numpy twin.

Set ``OVMLC_DISABLE_NUMBA=1`` to force the numpy path (also used when numba
is not importable). The counting kernels agree exactly across paths; the
k-means assignment agrees up to rounding in the squared distances.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

USE_NUMBA = njit is not None and os.environ.get("OVMLC_DISABLE_NUMBA", "") not in ("1", "true", "yes")


# tie-grouped cumulative counts along a descending score order


def tie_group_counts_numpy(scores_desc: np.ndarray, truth_desc: np.ndarray):
    """Distinct thresholds (descending) with cumulative TP and FP at each tie-group end."""
    n = scores_desc.shape[0]
    tp = np.cumsum(truth_desc.astype(np.int64))
    fp = np.arange(1, n + 1, dtype=np.int64) - tp
    ends = np.flatnonzero(np.append(scores_desc[1:] != scores_desc[:-1], True))
    return scores_desc[ends].copy(), tp[ends], fp[ends]


def _tie_group_counts_loop(scores_desc, truth_desc):
    n = scores_desc.shape[0]
    thr = np.empty(n, dtype=np.float64)
    tps = np.empty(n, dtype=np.int64)
    fps = np.empty(n, dtype=np.int64)
    tp = 0
    fp = 0
    m = 0
    for i in range(n):
        if truth_desc[i]:
            tp += 1
        else:
            fp += 1
        if i == n - 1 or scores_desc[i + 1] != scores_desc[i]:
            thr[m] = scores_desc[i]
            tps[m] = tp
            fps[m] = fp
            m += 1
    return thr[:m], tps[:m], fps[:m]


# counts of scores at or above each grid threshold


def counts_at_thresholds_numpy(pos_sorted: np.ndarray, neg_sorted: np.ndarray, grid: np.ndarray):
    tp = pos_sorted.shape[0] - np.searchsorted(pos_sorted, grid, side="left")
    fp = neg_sorted.shape[0] - np.searchsorted(neg_sorted, grid, side="left")
    return tp.astype(np.int64), fp.astype(np.int64)


def _lower_bound(a, x):
    lo, hi = 0, a.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _counts_at_thresholds_loop(pos_sorted, neg_sorted, grid):
    g = grid.shape[0]
    tp = np.empty(g, dtype=np.int64)
    fp = np.empty(g, dtype=np.int64)
    for j in range(g):
        tp[j] = pos_sorted.shape[0] - _lower_bound(pos_sorted, grid[j])
        fp[j] = neg_sorted.shape[0] - _lower_bound(neg_sorted, grid[j])
    return tp, fp


# nearest-centroid assignment for Lloyd iterations


def assign_clusters_numpy(x: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per row (first index on ties) and the summed squared distance."""
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    labels = d.argmin(axis=1)
    return labels.astype(np.int64), float(d[np.arange(x.shape[0]), labels].sum())


def _assign_clusters_loop(x, centroids):
    n, k, dim = x.shape[0], centroids.shape[0], x.shape[1]
    labels = np.empty(n, dtype=np.int64)
    inertia = 0.0
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            d = 0.0
            for j in range(dim):
                diff = x[i, j] - centroids[c, j]
                d += diff * diff
            if d < best:
                best = d
                arg = c
        labels[i] = arg
        inertia += best
    return labels, inertia


if njit is not None:
    tie_group_counts_numba = njit(cache=True)(_tie_group_counts_loop)
    _lower_bound = njit(cache=True)(_lower_bound)
    counts_at_thresholds_numba = njit(cache=True)(_counts_at_thresholds_loop)
    assign_clusters_numba = njit(cache=True)(_assign_clusters_loop)
else:  # pragma: no cover
    tie_group_counts_numba = _tie_group_counts_loop
    counts_at_thresholds_numba = _counts_at_thresholds_loop
    assign_clusters_numba = _assign_clusters_loop


def tie_group_counts(scores_desc, truth_desc):
    s = np.ascontiguousarray(scores_desc, dtype=np.float64)
    t = np.ascontiguousarray(truth_desc, dtype=np.bool_)
    return (tie_group_counts_numba if USE_NUMBA else tie_group_counts_numpy)(s, t)


def counts_at_thresholds(pos_sorted, neg_sorted, grid):
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (pos_sorted, neg_sorted, grid)]
    return (counts_at_thresholds_numba if USE_NUMBA else counts_at_thresholds_numpy)(*args)


def assign_clusters(x, centroids):
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    if USE_NUMBA:
        labels, inertia = assign_clusters_numba(x, c)
        return labels, float(inertia)
    return assign_clusters_numpy(x, c)

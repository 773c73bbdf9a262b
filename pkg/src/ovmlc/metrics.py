"""Micro-averaged PR curves, AUPR, F1 sweeps and max-min threshold calibration."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import counts_at_thresholds, tie_group_counts


@dataclass
class ScoredPairSet:
    """Pooled (video, label) decisions of one dataset."""

    scores: np.ndarray
    truths: np.ndarray
    name: str = "dataset"
    videos: list | None = None
    labels: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.truths = np.asarray(self.truths).astype(bool).ravel()
        if self.scores.shape != self.truths.shape:
            raise ValueError("scores and truths differ in length")

    @classmethod
    def from_records(cls, records, name="dataset") -> "ScoredPairSet":
        records = list(records)
        return cls([r["score"] for r in records], [r["truth"] for r in records], name,
                   [r["video"] for r in records], [r["label"] for r in records])

    @classmethod
    def load_jsonl(cls, path, name=None) -> "ScoredPairSet":
        with open(path, encoding="utf-8") as f:
            recs = [json.loads(ln) for ln in f if ln.strip()]
        return cls.from_records(recs, name or Path(path).stem)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


class UndefinedRecallError(ValueError):
    pass


def _as_pairs(pairs, truths=None) -> ScoredPairSet:
    if isinstance(pairs, ScoredPairSet):
        return pairs
    return ScoredPairSet(pairs, truths)


def pr_curve(pairs, truths=None) -> PRCurve:
    """One point per distinct score, swept from the highest; tied records enter together."""
    p = _as_pairs(pairs, truths)
    n_pos = int(p.truths.sum())
    if n_pos == 0:
        raise UndefinedRecallError("undefined recall: no positive records")
    order = np.argsort(-p.scores, kind="stable")
    thr, tp, fp = tie_group_counts(p.scores[order], p.truths[order])
    return PRCurve(tp / n_pos, tp / (tp + fp), thr)


def aupr(curve: PRCurve) -> float:
    """Step-integrated average precision: sum of recall increments times precision."""
    prev = np.concatenate([[0.0], curve.recall[:-1]])
    return math.fsum(((curve.recall - prev) * curve.precision).tolist())


def aupr_from_arrays(scores, truths) -> float:
    return aupr(pr_curve(scores, truths))


def threshold_grid(*score_arrays) -> np.ndarray:
    """All distinct scores plus the midpoints between neighbours, ascending."""
    u = np.unique(np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_arrays]))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate([u, mids]))


def f1_sweep(pairs, grid, truths=None) -> np.ndarray:
    """Micro F1 at each threshold, predicting positive iff ``s >= threshold``."""
    p = _as_pairs(pairs, truths)
    n_pos = int(p.truths.sum())
    if n_pos == 0:
        raise UndefinedRecallError("undefined recall: no positive records")
    grid = np.asarray(grid, dtype=np.float64)
    tp, fp = counts_at_thresholds(np.sort(p.scores[p.truths]), np.sort(p.scores[~p.truths]), grid)
    fn = n_pos - tp
    return 2 * tp / (2 * tp + fp + fn)


def peak_f1(pairs, truths=None) -> tuple[float, float]:
    """(best F1, its threshold) over the distinct-score-plus-midpoint grid; ties go to the lower threshold."""
    p = _as_pairs(pairs, truths)
    grid = threshold_grid(p.scores)
    f1 = f1_sweep(p, grid)
    i = int(np.argmax(f1))
    return float(f1[i]), float(grid[i])


def peak_f1_from_arrays(scores, truths) -> tuple[float, float]:
    return peak_f1(scores, truths)


def macro_aupr(scores: np.ndarray, truths: np.ndarray) -> float:
    """Mean per-column AUPR over columns (labels) with at least one positive."""
    s, t = np.asarray(scores, dtype=np.float64), np.asarray(truths).astype(bool)
    vals = [aupr_from_arrays(s[:, j], t[:, j]) for j in range(s.shape[1]) if t[:, j].any()]
    if not vals:
        raise UndefinedRecallError("undefined recall: no label has a positive")
    return float(np.mean(vals))


@dataclass
class ThresholdSelection:
    threshold: float
    f1: dict
    rule: str = "max-min"


def select_threshold_maxmin(datasets, grid=None) -> ThresholdSelection:
    """Threshold maximizing the minimum F1 across datasets; ties go to the lower threshold."""
    datasets = [_as_pairs(d) for d in datasets]
    if not datasets:
        raise ValueError("need at least one dataset")
    grid = threshold_grid(*(d.scores for d in datasets)) if grid is None else np.sort(np.asarray(grid, float))
    curves = np.stack([f1_sweep(d, grid) for d in datasets])
    i = int(np.argmax(curves.min(axis=0)))
    return ThresholdSelection(float(grid[i]), {d.name: float(c[i]) for d, c in zip(datasets, curves)})


def summarize(pairs: ScoredPairSet) -> dict:
    best, thr = peak_f1(pairs)
    return {"aupr": aupr(pr_curve(pairs)), "peak_f1": best, "peak_threshold": thr,
            "n_pairs": int(pairs.scores.size), "prevalence": float(pairs.truths.mean())}


def emit_report(datasets, out_dir, threshold: float | None = None) -> dict:
    """Write ``metrics.json`` and ``f1_curves.svg`` (one curve per dataset, threshold marked)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise PermissionError(f"report directory {out} is not writable")
    datasets = [_as_pairs(d) for d in datasets]
    summary = {"datasets": {d.name: summarize(d) for d in datasets}}
    if threshold is None and datasets:
        sel = select_threshold_maxmin(datasets)
        threshold = sel.threshold
    if threshold is not None:
        summary["threshold"] = threshold
        summary["f1_at_threshold"] = {d.name: float(f1_sweep(d, [threshold])[0]) for d in datasets}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _plot_f1_curves(datasets, threshold, out / "f1_curves.svg")
    return summary


def _plot_f1_curves(datasets, threshold, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ovmlc"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for d in datasets:
        grid = threshold_grid(d.scores)
        ax.plot(grid, f1_sweep(d, grid), label=d.name)
    if threshold is not None:
        ax.axvline(threshold, color="k", linestyle="--", linewidth=1, label=f"threshold {threshold:.3f}")
    ax.set_xlabel("threshold on s")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

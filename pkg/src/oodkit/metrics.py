"""OOD detection metrics with brute-force-verifiable semantics.

AUROC is the probability that a random ID score exceeds a random OOD score
with ties worth half credit, computed via average ranks so it matches the
exhaustive pairwise count exactly. FPR-at-TPR picks the largest threshold
that still accepts the target fraction of ID scores (ties count as accepted).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    fpr95: float
    auroc: float
    gamma95: float
    id_count: int
    ood_count: int

    def to_dict(self):
        return {
            "fpr95": self.fpr95,
            "auroc": self.auroc,
            "gamma95": self.gamma95,
            "id_count": self.id_count,
            "ood_count": self.ood_count,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _as_scores(values, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} score list is empty")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """Rank-statistic AUROC, exactly equal to the pairwise count with 0.5 per tie."""
    ids = _as_scores(id_scores, "ID")
    oods = _as_scores(ood_scores, "OOD")
    n, m = ids.size, oods.size
    pooled = np.concatenate([ids, oods])
    uniq, inverse, counts = np.unique(pooled, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    average_rank = upper - (counts - 1) / 2.0
    ranks = average_rank[inverse]
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95):
    """(fpr, gamma): gamma is the largest threshold accepting >= tpr_target of
    the ID scores under the inclusive >= rule; fpr is the OOD fraction >= gamma."""
    ids = _as_scores(id_scores, "ID")
    oods = _as_scores(ood_scores, "OOD")
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    candidates = np.unique(ids)[::-1]
    n = ids.size
    gamma = candidates[-1]
    for value in candidates:
        if np.count_nonzero(ids >= value) / n >= tpr_target:
            gamma = value
            break
    fpr = np.count_nonzero(oods >= gamma) / oods.size
    return float(fpr), float(gamma)


def clamped_histogram(values, bins: int, value_range) -> np.ndarray:
    """Equal-width bin counts over [lo, hi); out-of-range values land in the edge bins."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not hi > lo:
        raise ValueError(f"empty histogram range [{lo}, {hi})")
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    counts = np.zeros(bins, dtype=np.int64)
    if arr.size == 0:
        return counts
    idx = np.floor((arr - lo) / (hi - lo) * bins).astype(np.int64)
    np.add.at(counts, np.clip(idx, 0, bins - 1), 1)
    return counts


def norm_histogram(vectors, bins: int, value_range) -> np.ndarray:
    """Histogram of per-vector L2 norms of an (N, C) array."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (N, C) vectors, got {arr.ndim}-d")
    norms = np.sqrt((arr * arr).sum(axis=1))
    return clamped_histogram(norms, bins, value_range)


def write_histogram_csv(path, bins: int, value_range, id_counts, ood_counts) -> None:
    """Two-split histogram CSV with the stable header bin_lo,bin_hi,count_id,count_ood."""
    lo, hi = float(value_range[0]), float(value_range[1])
    width = (hi - lo) / bins
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count_id,count_ood\n")
        for b in range(bins):
            fh.write(
                f"{lo + b * width:.8g},{lo + (b + 1) * width:.8g},"
                f"{int(id_counts[b])},{int(ood_counts[b])}\n"
            )

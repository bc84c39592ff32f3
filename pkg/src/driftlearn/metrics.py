"""Region and boundary mask scoring (DAVIS-style J, F, and their mean),
plus per-sub-chunk forgetting summaries.

Conventions: masks are binary (H, W) arrays. When both masks are empty, J
and F are defined as 1.0 so all-background frames do not poison aggregates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import UsageError
from .validation import as_binary_mask, check_same_shape


def jaccard(pred, gt):
    """Intersection over union of the foreground regions, in [0, 1]."""
    pred = as_binary_mask(pred, name="pred")
    gt = as_binary_mask(gt, name="gt")
    check_same_shape(pred, gt, "pred", "gt")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def mask_boundary(mask):
    """4-connected boundary: foreground pixels with a background (or
    out-of-canvas) neighbour above, below, left, or right."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_boundary_tolerance(shape):
    """DAVIS convention: 0.8% of the image diagonal, rounded up."""
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def _disk_footprint(radius):
    r = int(radius)
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    return (ys * ys + xs * xs) <= r * r


def boundary_f(pred, gt, tolerance_radius=None):
    """Boundary F-measure: precision/recall of boundary pixels matched
    within a Euclidean pixel radius (integer-exact via disk dilation)."""
    pred = as_binary_mask(pred, name="pred")
    gt = as_binary_mask(gt, name="gt")
    check_same_shape(pred, gt, "pred", "gt")
    if tolerance_radius is None:
        tolerance_radius = default_boundary_tolerance(pred.shape)
    if tolerance_radius < 0:
        raise UsageError(f"tolerance_radius must be >= 0, got {tolerance_radius}")

    pb = mask_boundary(pred)
    gb = mask_boundary(gt)
    n_pred = int(pb.sum())
    n_gt = int(gb.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0

    footprint = _disk_footprint(tolerance_radius)
    gb_zone = ndimage.binary_dilation(gb, structure=footprint)
    pb_zone = ndimage.binary_dilation(pb, structure=footprint)
    precision = float((pb & gb_zone).sum() / n_pred)
    recall = float((gb & pb_zone).sum() / n_gt)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def score_masks(pred, gt, tolerance_radius=None):
    """Return (J, F, J&F) for one mask pair."""
    j = jaccard(pred, gt)
    f = boundary_f(pred, gt, tolerance_radius)
    return j, f, (j + f) / 2.0


@dataclass(frozen=True)
class ScoreRecord:
    """One evaluation of one annotated frame. ``phase`` is "online" for the
    streaming pass and "revisit" for replays through a later model."""

    frame: int
    sub_chunk: int
    J: float
    F: float
    JF: float
    phase: str = "online"

    def to_dict(self):
        return asdict(self)


def aggregate(records):
    """Arithmetic means of J, F, J&F over score records (dicts or
    ScoreRecords)."""
    rows = [r.to_dict() if isinstance(r, ScoreRecord) else r for r in records]
    if not rows:
        raise UsageError("aggregate needs at least one record")
    return {
        "mean_J": float(np.mean([r["J"] for r in rows])),
        "mean_F": float(np.mean([r["F"] for r in rows])),
        "mean_JF": float(np.mean([r["JF"] for r in rows])),
        "n_records": len(rows),
    }


def population_std(values):
    """Population (ddof=0) standard deviation, e.g. across a sweep of runs."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise UsageError("population_std needs at least one value")
    return float(values.std(ddof=0))


def forgetting_report(records):
    """Per-sub-chunk forgetting: best J&F seen minus J&F at the last
    evaluation, averaged over sub-chunks evaluated at least twice.

    ``records`` must be in evaluation order (online pass first, replays
    after).
    """
    rows = [r.to_dict() if isinstance(r, ScoreRecord) else r for r in records]
    by_chunk = {}
    for row in rows:
        by_chunk.setdefault(row["sub_chunk"], []).append(row["JF"])
    per = []
    deltas = []
    for chunk in sorted(by_chunk):
        scores = by_chunk[chunk]
        best = max(scores)
        final = scores[-1]
        entry = {
            "sub_chunk": chunk,
            "best_JF": best,
            "final_JF": final,
            "forgetting": best - final,
            "n_evaluations": len(scores),
        }
        per.append(entry)
        if len(scores) >= 2:
            deltas.append(best - final)
    return {
        "per_sub_chunk": per,
        "mean_forgetting": float(np.mean(deltas)) if deltas else 0.0,
    }

"""Dataset curation: split a stream into sub-chunks at distribution drifts,
then pick the frames worth annotating (first and middle of every sub-chunk
plus the last frame of the sequence).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigurationError, UsageError
from .streams import Frame, StreamSpec, SubChunk, save_manifest

STATISTICS = ("global_mean", "channel_histogram")
DISTANCES = ("euclidean", "chi_square")
HISTOGRAM_BINS = 16


def _frame_features(frames):
    out = []
    for f in frames:
        out.append(f.features if isinstance(f, Frame) else np.asarray(f, dtype=np.float64))
    if not out:
        raise UsageError("need at least one frame")
    return out


def _window_statistic(features, statistic):
    stack = np.stack(features)  # (n, H, W, C)
    if statistic == "global_mean":
        return stack.mean(axis=(0, 1, 2))
    # channel_histogram: per-channel frequency histogram over fixed bins,
    # concatenated across channels
    channels = stack.shape[-1]
    lo, hi = stack.min(), stack.max()
    if lo == hi:
        hi = lo + 1.0
    hists = []
    for c in range(channels):
        counts, _ = np.histogram(stack[..., c], bins=HISTOGRAM_BINS, range=(lo, hi))
        hists.append(counts / counts.sum())
    return np.concatenate(hists)


def _distance(a, b, kind):
    if kind == "euclidean":
        return float(np.linalg.norm(a - b))
    denom = a + b
    safe = np.where(denom > 0, denom, 1.0)
    return float(0.5 * np.sum((a - b) ** 2 / safe))


class DriftDetector(BaseEstimator):
    """Windowed change-point detector over per-frame feature statistics.

    A drift is flagged at frame t when the statistic of the window ending at
    t-1 and the statistic of the window starting at t differ by more than
    ``threshold``. With smoothing_window > 1 a single drift can exceed the
    threshold at several adjacent frames, so above-threshold frames within
    one window length of each other are clustered and only the largest
    distance in each cluster becomes a boundary.

    After fit: ``boundaries_`` (frame indices that start a sub-chunk, always
    including 0), ``sub_chunks_`` ((start, end) pairs), ``distances_``.
    """

    def __init__(
        self,
        statistic="global_mean",
        distance="euclidean",
        threshold=1.0,
        smoothing_window=1,
    ):
        self.statistic = statistic
        self.distance = distance
        self.threshold = threshold
        self.smoothing_window = smoothing_window

    def fit(self, frames, y=None):
        if self.statistic not in STATISTICS:
            raise ConfigurationError(
                f"statistic must be one of {STATISTICS}, got {self.statistic!r}"
            )
        if self.distance not in DISTANCES:
            raise ConfigurationError(
                f"distance must be one of {DISTANCES}, got {self.distance!r}"
            )
        if not self.threshold > 0:
            raise ConfigurationError(f"threshold must be > 0, got {self.threshold}")
        if self.smoothing_window < 1:
            raise ConfigurationError(
                f"smoothing_window must be >= 1, got {self.smoothing_window}"
            )
        features = _frame_features(frames)
        n = len(features)
        w = int(self.smoothing_window)

        distances = np.zeros(n)
        for t in range(1, n):
            left = features[max(0, t - w) : t]
            right = features[t : min(n, t + w)]
            distances[t] = _distance(
                _window_statistic(left, self.statistic),
                _window_statistic(right, self.statistic),
                self.distance,
            )

        above = [t for t in range(1, n) if distances[t] > self.threshold]
        boundaries = [0]
        cluster = []
        for t in above + [None]:
            if cluster and (t is None or t - cluster[-1] >= w):
                peak = max(cluster, key=lambda u: (distances[u], -u))
                boundaries.append(peak)
                cluster = []
            if t is not None:
                cluster.append(t)

        self.distances_ = distances
        self.boundaries_ = sorted(set(boundaries))
        self.sub_chunks_ = [
            (s, e - 1)
            for s, e in zip(self.boundaries_, self.boundaries_[1:] + [n])
        ]
        return self

    def fit_predict(self, frames, y=None):
        return self.fit(frames).sub_chunks_


def select_annotation_frames(sub_chunks, total_frames, ground_truth_frame=0):
    """First and middle frame of every sub-chunk plus the last frame of the
    sequence, deduplicated and sorted.

    ``sub_chunks`` may be SubChunk objects or (start, end) pairs covering
    [0, total_frames - 1]. The returned list always contains the
    ground-truth frame (as a sub-chunk first frame) and total_frames - 1.
    """
    if not sub_chunks:
        raise UsageError("need at least one sub-chunk")
    pairs = [
        (c.start_frame, c.end_frame) if isinstance(c, SubChunk) else (int(c[0]), int(c[1]))
        for c in sub_chunks
    ]
    if pairs[0][0] != 0 or pairs[-1][1] != total_frames - 1:
        raise UsageError(
            f"sub-chunks {pairs[0][0]}..{pairs[-1][1]} do not cover the "
            f"{total_frames}-frame sequence"
        )
    selected = {total_frames - 1}
    for start, end in pairs:
        selected.add(start)
        selected.add((start + end) // 2)
    if ground_truth_frame not in selected:
        selected.add(ground_truth_frame)
    return sorted(selected)


def evaluation_frames(annotated_frames, ground_truth_frame=0):
    """Annotated frames that are scored; the given ground-truth frame is
    excluded (its mask is an input, not a prediction target)."""
    return [f for f in annotated_frames if f != ground_truth_frame]


def write_manifest(spec, sub_chunks, annotated_frames, path):
    """Emit a stream manifest carrying ``sub_chunks`` and
    ``annotated_frames`` in place of the spec's own. Validates before
    writing; round-trips through load_manifest."""
    chunks = [
        c if isinstance(c, SubChunk) else SubChunk(int(c[0]), int(c[1]))
        for c in sub_chunks
    ]
    out = StreamSpec(
        height=spec.height,
        width=spec.width,
        channels=spec.channels,
        seed=spec.seed,
        sub_chunks=chunks,
        ground_truth_frame=spec.ground_truth_frame,
        annotated_frames=sorted(annotated_frames),
        fps=spec.fps,
    )
    out.validate()
    save_manifest(out, path)
    return out

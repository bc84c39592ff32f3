"""The online training engine.

The data loss over the frame memory is

    L(theta) = sum_n || d_n * W_n * (Y_n - scores_n) ||^2  +  lambda_wd * sum_k theta_k^2

with d_n the temporal decay weight of entry n and W_n its per-pixel
class-balance weight (both inside the norm, hence squared; a "linear"
weighting variant applies d_n * W_n once on the squared residual). The
snapshot penalty adds

    lambda_r * sum_j sum_k phi_jk * (theta_k - theta_jk)^2

over every retained (parameters, importance) snapshot. Updates are
full-batch gradient descent; the step uses the gradient divided by
(entries * pixels) so one learning rate works across canvas sizes and
memory fill levels.

OnlineSegmenter wires these into the streaming loop: predict each frame,
insert (features, predicted mask) into the frame memory every delta_m
frames, update the model every delta_c frames, snapshot after every update,
and score annotated frames on the fly.
"""

from __future__ import annotations

import hashlib
import json
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ConfigurationError, DivergenceError, StateError, UsageError
from .memory import FrameMemory, SnapshotMemory
from .metrics import ScoreRecord, aggregate, forgetting_report, score_masks
from .model import CALIBRATED_THRESHOLD, ConvPredictor, decode_mask
from .numerics import im2col
from .validation import as_binary_mask, as_param_vector

IMPORTANCE_MODES = ("abs_grad", "sq_grad")
WEIGHTINGS = ("squared", "linear")


def spatial_weights(mask, cap=100.0):
    """Per-pixel class-balance weights from a binary mask.

    Foreground pixels weigh T / (2 * n_fg), background T / (2 * n_bg) with
    T the pixel count; each class weight is clamped to [1/cap, cap]. If one
    class is empty every pixel gets weight 1.
    """
    mask = as_binary_mask(mask)
    if cap < 1:
        raise ConfigurationError(f"weight cap must be >= 1, got {cap}")
    total = mask.size
    n_fg = int(mask.sum())
    n_bg = total - n_fg
    if n_fg == 0 or n_bg == 0:
        return np.ones(mask.shape)
    w_fg = min(max(total / (2.0 * n_fg), 1.0 / cap), cap)
    w_bg = min(max(total / (2.0 * n_bg), 1.0 / cap), cap)
    return np.where(mask.astype(bool), w_fg, w_bg)


def _prepare_entries(memory, kernel_size, weight_cap, cache):
    """Per-entry (patches, targets, pixel weights), cached by insertion step."""
    if cache is None:
        cache = {}
    live = {entry.step for entry in memory.entries}
    for stale in set(cache) - live:
        del cache[stale]
    prepared = []
    for entry in memory.entries:
        hit = cache.get(entry.step)
        if hit is None:
            patches = im2col(entry.features, kernel_size)
            y = entry.mask.astype(np.float64).ravel()
            w = spatial_weights(entry.mask, cap=weight_cap).ravel()
            hit = (patches, y, w)
            cache[entry.step] = hit
        prepared.append(hit)
    return prepared


def _entry_gradients(model, memory, current_step, weighting, weight_cap, cache):
    """Loss terms and parameter gradients of each memory entry's data term."""
    if len(memory) == 0:
        raise StateError("frame memory is empty")
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    w_flat = model.weights.reshape(-1, 1)
    decays = memory.temporal_weights(current_step)
    losses = []
    grads = []
    for (patches, y, w), d in zip(
        _prepare_entries(memory, model.kernel_size, weight_cap, cache), decays
    ):
        scores = (patches @ w_flat)[:, 0] + model.bias[0]
        residual = y - scores
        if weighting == "squared":
            weighted = (d * w * residual) ** 2
            upstream = -2.0 * (d * d) * (w * w) * residual
        else:
            weighted = d * w * residual * residual
            upstream = -2.0 * d * w * residual
        losses.append(float(weighted.sum()))
        grads.append(np.concatenate([patches.T @ upstream, [upstream.sum()]]))
    return losses, grads


def data_loss(
    model,
    memory,
    current_step,
    lambda_wd=0.0,
    weighting="squared",
    weight_cap=100.0,
    cache=None,
):
    """Weighted squared-residual loss over the frame memory plus weight
    decay; returns (loss, gradient over the flat parameter vector)."""
    losses, grads = _entry_gradients(
        model, memory, current_step, weighting, weight_cap, cache
    )
    theta = model.theta
    loss = float(sum(losses)) + lambda_wd * float(theta @ theta)
    grad = np.sum(grads, axis=0) + 2.0 * lambda_wd * theta
    return loss, grad


def compute_importance(
    model,
    memory,
    current_step=None,
    mode="abs_grad",
    weighting="squared",
    weight_cap=100.0,
    cache=None,
):
    """Per-parameter importance: the mean over memory entries of the
    magnitude (or square, for mode="sq_grad") of each entry's data-loss
    gradient at the current parameters. Always non-negative."""
    if mode not in IMPORTANCE_MODES:
        raise ConfigurationError(f"mode must be one of {IMPORTANCE_MODES}, got {mode!r}")
    if len(memory) == 0:
        raise StateError("cannot compute importance over an empty memory")
    if current_step is None:
        current_step = max(entry.step for entry in memory.entries)
    _, grads = _entry_gradients(model, memory, current_step, weighting, weight_cap, cache)
    stacked = np.abs(np.stack(grads))
    if mode == "sq_grad":
        stacked = stacked**2
    return stacked.mean(axis=0)


def rcl_penalty(theta, snapshots, lambda_r):
    """Quadratic anchor to every stored snapshot, importance-weighted per
    coordinate; returns (penalty, gradient)."""
    theta = as_param_vector(theta, name="theta")
    snaps = snapshots.snapshots if isinstance(snapshots, SnapshotMemory) else list(snapshots)
    penalty = 0.0
    grad = np.zeros_like(theta)
    for snap in snaps:
        if snap.theta.size != theta.size:
            raise ConfigurationError(
                f"snapshot length {snap.theta.size} does not match theta length {theta.size}"
            )
        diff = theta - snap.theta
        penalty += float(snap.phi @ (diff * diff))
        grad += 2.0 * snap.phi * diff
    return lambda_r * penalty, lambda_r * grad


def update_model(
    model,
    memory,
    snapshots,
    current_step,
    epochs=3,
    learning_rate=1e-3,
    lambda_wd=1e-3,
    lambda_r=5.0,
    rcl_enabled=True,
    weighting="squared",
    weight_cap=100.0,
    importance="abs_grad",
    cache=None,
):
    """Run ``epochs`` full-batch descent steps on the (optionally
    snapshot-regularized) loss, then push a fresh (parameters, importance)
    snapshot. Returns the updated model; raises DivergenceError on a
    non-finite loss."""
    if len(memory) == 0:
        raise StateError("cannot update on an empty memory")
    h, w = memory.entries[0].features.shape[:2]
    step_scale = learning_rate / (len(memory) * h * w)
    use_penalty = rcl_enabled and lambda_r != 0.0 and len(snapshots) > 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            loss, grad = data_loss(
                model,
                memory,
                current_step,
                lambda_wd=lambda_wd,
                weighting=weighting,
                weight_cap=weight_cap,
                cache=cache,
            )
            if use_penalty:
                penalty, penalty_grad = rcl_penalty(model.theta, snapshots, lambda_r)
                loss += penalty
                grad += penalty_grad
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at step {current_step}, epoch {epoch}",
                    step=current_step,
                    epoch=epoch,
                )
            new_theta = model.theta - step_scale * grad
            if not np.all(np.isfinite(new_theta)):
                raise DivergenceError(
                    f"non-finite parameters at step {current_step}, epoch {epoch}",
                    step=current_step,
                    epoch=epoch,
                )
            model.theta = new_theta
    phi = compute_importance(
        model,
        memory,
        current_step,
        mode=importance,
        weighting=weighting,
        weight_cap=weight_cap,
        cache=cache,
    )
    snapshots.push(model.theta, phi, step=current_step)
    return model


def report_to_json(report, include_timing=True):
    """Canonical JSON serialization of a run report. Timing is the only
    nondeterministic part of a report, so determinism checks drop it."""
    if not include_timing:
        report = {k: v for k, v in report.items() if k != "timing"}
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


class OnlineSegmenter(BaseEstimator):
    """Online continually-learning segmenter over a frame stream.

    fit() consumes the whole stream in order: the given ground-truth frame
    initializes the frame memory and the model, every frame is segmented by
    the current model before any training touches it, the memory takes
    (features, predicted mask) every ``delta_m`` frames, and the model is
    refit on the memory every ``delta_c`` frames. With ``rcl_enabled`` the
    refit is anchored to the snapshot memory; ``lambda_r=0`` or
    ``rcl_enabled=False`` is the plain baseline.

    Fitted attributes: ``model_``, ``frame_memory_``, ``snapshot_memory_``,
    ``predictions_`` (one mask per processed frame), ``records_``, and
    ``report_`` (JSON-ready summary of the run).
    """

    def __init__(
        self,
        delta_c=1,
        delta_m=None,
        epochs_per_update=3,
        init_epochs=100,
        learning_rate=1e-3,
        lambda_wd=1e-3,
        lambda_r=5.0,
        rcl_enabled=True,
        memory_size=32,
        snapshot_memory_size=20,
        decay_gamma=0.95,
        decay_pinned=False,
        importance="abs_grad",
        weighting="squared",
        weight_cap=100.0,
        threshold=CALIBRATED_THRESHOLD,
        kernel_size=3,
        boundary_tolerance=None,
        revisit=True,
        random_state=0,
    ):
        self.delta_c = delta_c
        self.delta_m = delta_m
        self.epochs_per_update = epochs_per_update
        self.init_epochs = init_epochs
        self.learning_rate = learning_rate
        self.lambda_wd = lambda_wd
        self.lambda_r = lambda_r
        self.rcl_enabled = rcl_enabled
        self.memory_size = memory_size
        self.snapshot_memory_size = snapshot_memory_size
        self.decay_gamma = decay_gamma
        self.decay_pinned = decay_pinned
        self.importance = importance
        self.weighting = weighting
        self.weight_cap = weight_cap
        self.threshold = threshold
        self.kernel_size = kernel_size
        self.boundary_tolerance = boundary_tolerance
        self.revisit = revisit
        self.random_state = random_state

    @property
    def method(self):
        return "rcl" if self.rcl_enabled else "baseline"

    def _validate_params(self):
        if self.delta_c < 1:
            raise ConfigurationError(f"delta_c must be >= 1, got {self.delta_c}")
        if self.delta_m is not None and self.delta_m < 1:
            raise ConfigurationError(f"delta_m must be >= 1, got {self.delta_m}")
        if self.epochs_per_update < 1:
            raise ConfigurationError(
                f"epochs_per_update must be >= 1, got {self.epochs_per_update}"
            )
        if self.init_epochs < 1:
            raise ConfigurationError(f"init_epochs must be >= 1, got {self.init_epochs}")
        if not self.learning_rate >= 0:
            raise ConfigurationError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if self.lambda_wd < 0 or self.lambda_r < 0:
            raise ConfigurationError("lambda_wd and lambda_r must be >= 0")
        return int(self.delta_m if self.delta_m is not None else self.delta_c)

    def _effective_config(self, delta_m):
        cfg = {k: v for k, v in self.get_params().items()}
        cfg["delta_m"] = delta_m
        cfg["method"] = self.method
        return cfg

    def fit(
        self,
        frames,
        annotated_frames=None,
        sub_chunks=None,
        ground_truth_frame=0,
        stream_id=None,
        record_callback=None,
    ):
        """Run the full online loop over ``frames`` (a list of Frame).

        annotated_frames: frame indices scored during the pass (default:
        every frame that carries a truth mask). The ground-truth frame is
        given, not evaluated. sub_chunks: (start, end) pairs used to label
        records; default one chunk spanning the stream.
        """
        delta_m = self._validate_params()
        frames = list(frames)
        if not frames:
            raise UsageError("cannot fit on an empty stream")
        total = len(frames)
        if not 0 <= ground_truth_frame < total:
            raise UsageError(f"ground_truth_frame {ground_truth_frame} out of range")
        gt = frames[ground_truth_frame]
        if gt.truth_mask is None:
            raise UsageError("the ground-truth frame must carry a truth mask")

        if annotated_frames is None:
            annotated_frames = [f.index for f in frames if f.truth_mask is not None]
        eval_frames = sorted(set(annotated_frames) - {ground_truth_frame})
        for idx in eval_frames:
            if not 0 <= idx < total:
                raise UsageError(f"annotated frame {idx} is outside the stream")
            if frames[idx].truth_mask is None:
                raise UsageError(f"annotated frame {idx} has no truth mask")
        if sub_chunks is None:
            sub_chunks = [(0, total - 1)]
        chunk_bounds = [(int(s), int(e)) for s, e in sub_chunks]

        def chunk_of(frame_index):
            for i, (s, e) in enumerate(chunk_bounds):
                if s <= frame_index <= e:
                    return i
            return len(chunk_bounds) - 1

        channels = gt.features.shape[2]
        model = ConvPredictor.initialize(
            in_channels=channels, kernel_size=self.kernel_size, seed=self.random_state
        )
        memory = FrameMemory(
            gt.features,
            gt.truth_mask,
            capacity=self.memory_size,
            decay_gamma=self.decay_gamma,
            ground_truth_step=ground_truth_frame,
            decay_pinned=self.decay_pinned,
        )
        snapshots = SnapshotMemory(capacity=self.snapshot_memory_size)
        cache = {}

        events = {
            "inserts": 0,
            "updates": 0,
            "frame_evictions": 0,
            "snapshots": 0,
            "snapshot_evictions": 0,
        }
        audit = {
            "max_frame_memory": len(memory),
            "max_snapshot_memory": 0,
            "ground_truth_always_present": True,
            "initial_snapshot_always_present": True,
        }
        records = []
        predictions = []
        digest = hashlib.sha256()
        frame_seconds = 0.0
        frames_timed = 0
        diverged = None

        def audit_step():
            audit["max_frame_memory"] = max(audit["max_frame_memory"], len(memory))
            audit["max_snapshot_memory"] = max(audit["max_snapshot_memory"], len(snapshots))
            if not memory.has_pinned:
                audit["ground_truth_always_present"] = False
            if len(snapshots) > 0 and not snapshots.has_pinned:
                audit["initial_snapshot_always_present"] = False

        def finish(status):
            within = (
                audit["max_frame_memory"] <= self.memory_size
                and audit["max_snapshot_memory"] <= self.snapshot_memory_size
            )
            online = [r for r in records if r.phase == "online"]
            per_chunk = []
            for i in range(len(chunk_bounds)):
                rows = [r for r in online if r.sub_chunk == i]
                if rows:
                    entry = aggregate(rows)
                    entry["sub_chunk"] = i
                    per_chunk.append(entry)
            report = {
                "status": status,
                "config": self._effective_config(delta_m),
                "stream": {
                    "n_frames": total,
                    "height": gt.features.shape[0],
                    "width": gt.features.shape[1],
                    "channels": channels,
                    "ground_truth_frame": ground_truth_frame,
                    "sub_chunks": [list(b) for b in chunk_bounds],
                    "evaluation_frames": eval_frames,
                    "stream_id": stream_id,
                },
                "records": [r.to_dict() for r in records],
                "summary": aggregate(online) if online else None,
                "per_sub_chunk": per_chunk,
                "forgetting": forgetting_report(records),
                "events": dict(events),
                "audit": {**audit, "within_bounds": within},
                "predictions_digest": digest.hexdigest(),
                "timing": {
                    "total_s": frame_seconds,
                    "frames_timed": frames_timed,
                    "mean_frame_ms": (frame_seconds / frames_timed * 1000.0)
                    if frames_timed
                    else 0.0,
                },
            }
            if diverged is not None:
                report["diverged_at"] = diverged
            return report

        update_kwargs = dict(
            epochs=self.epochs_per_update,
            learning_rate=self.learning_rate,
            lambda_wd=self.lambda_wd,
            lambda_r=self.lambda_r,
            rcl_enabled=self.rcl_enabled,
            weighting=self.weighting,
            weight_cap=self.weight_cap,
            importance=self.importance,
            cache=cache,
        )

        try:
            # initial fit on the pinned ground-truth entry, then the first
            # snapshot (which becomes the pinned anchor)
            update_model(
                model,
                memory,
                snapshots,
                current_step=ground_truth_frame,
                **{**update_kwargs, "epochs": self.init_epochs},
            )
            events["snapshots"] += 1
            audit_step()

            for t in range(ground_truth_frame, total):
                frame = frames[t]
                tic = time.perf_counter()
                scores = model.scores(frame.features)
                mask = decode_mask(scores, self.threshold)
                seen = t - ground_truth_frame + 1
                if seen % delta_m == 0:
                    before = memory.evictions
                    memory.insert(frame.features, mask, step=t + 1)
                    events["inserts"] += 1
                    events["frame_evictions"] += memory.evictions - before
                if seen % self.delta_c == 0:
                    before = snapshots.evictions
                    update_model(model, memory, snapshots, current_step=t + 1, **update_kwargs)
                    events["updates"] += 1
                    events["snapshots"] += 1
                    events["snapshot_evictions"] += snapshots.evictions - before
                frame_seconds += time.perf_counter() - tic
                frames_timed += 1

                predictions.append(mask)
                digest.update(mask.tobytes())
                if t in eval_frames:
                    j, f, jf = score_masks(mask, frame.truth_mask, self.boundary_tolerance)
                    record = ScoreRecord(
                        frame=t, sub_chunk=chunk_of(t), J=j, F=f, JF=jf, phase="online"
                    )
                    records.append(record)
                    if record_callback is not None:
                        record_callback(record)
                audit_step()

            if self.revisit:
                for t in eval_frames:
                    mask = model.predict_mask(frames[t].features, self.threshold)
                    j, f, jf = score_masks(
                        mask, frames[t].truth_mask, self.boundary_tolerance
                    )
                    record = ScoreRecord(
                        frame=t, sub_chunk=chunk_of(t), J=j, F=f, JF=jf, phase="revisit"
                    )
                    records.append(record)
                    if record_callback is not None:
                        record_callback(record)
        except DivergenceError as exc:
            diverged = {"step": exc.step, "epoch": exc.epoch}
            self.report_ = finish("diverged")
            exc.partial_report = self.report_
            self.model_ = model
            self.frame_memory_ = memory
            self.snapshot_memory_ = snapshots
            self.predictions_ = predictions
            self.records_ = records
            raise

        self.model_ = model
        self.frame_memory_ = memory
        self.snapshot_memory_ = snapshots
        self.predictions_ = predictions
        self.records_ = records
        self.report_ = finish("ok")
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this OnlineSegmenter has not been fitted yet")

    def decision_function(self, features):
        """Score map for one feature grid under the final model."""
        self._check_fitted()
        return self.model_.scores(features)

    def predict(self, features):
        """Binary mask for one feature grid under the final model."""
        self._check_fitted()
        return self.model_.predict_mask(features, self.threshold)

    def score(self, features, truth_mask):
        """Mean of region and boundary scores against a truth mask."""
        self._check_fitted()
        _, _, jf = score_masks(self.predict(features), truth_mask, self.boundary_tolerance)
        return jf

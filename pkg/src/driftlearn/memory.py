"""The two bounded stores of the online loop.

FrameMemory keeps (features, mask) training pairs with the given
ground-truth pair pinned forever; SnapshotMemory keeps (parameters,
importance) pairs with the initial pair pinned forever. Both evict the
oldest non-pinned entry when full, so their size never exceeds capacity and
eviction is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .validation import as_binary_mask, as_feature_grid, as_param_vector


@dataclass(frozen=True)
class MemoryEntry:
    features: np.ndarray
    mask: np.ndarray
    step: int
    pinned: bool = False


class FrameMemory:
    """Bounded training-set memory, initialized with the pinned ground truth.

    Temporal weights follow decay_gamma ** age with the pinned entry exempt
    (weight 1) unless decay_pinned is set; weights are then normalized to
    sum to the number of entries so the data-loss scale does not depend on
    how full the memory is.
    """

    def __init__(
        self,
        ground_truth_features,
        ground_truth_mask,
        capacity=32,
        decay_gamma=0.95,
        ground_truth_step=0,
        decay_pinned=False,
    ):
        if capacity < 1:
            raise ConfigurationError(f"capacity must be >= 1, got {capacity}")
        if not 0.0 < decay_gamma <= 1.0:
            raise ConfigurationError(f"decay_gamma must be in (0, 1], got {decay_gamma}")
        features = as_feature_grid(ground_truth_features, name="ground-truth features")
        mask = as_binary_mask(
            ground_truth_mask, shape=features.shape[:2], name="ground-truth mask"
        )
        self.capacity = capacity
        self.decay_gamma = decay_gamma
        self.decay_pinned = decay_pinned
        self.entries = [
            MemoryEntry(features=features, mask=mask, step=ground_truth_step, pinned=True)
        ]
        self.evictions = 0

    def __len__(self):
        return len(self.entries)

    @property
    def has_pinned(self):
        return any(e.pinned for e in self.entries)

    def insert(self, features, mask, step):
        """Append a (features, predicted mask) pair, evicting the oldest
        non-pinned entry if the memory is full. Steps must be strictly
        increasing."""
        if any(step <= e.step for e in self.entries):
            raise UsageError(
                f"insert step {step} is not greater than all stored steps"
            )
        features = as_feature_grid(
            features, channels=self.entries[0].features.shape[2], name="features"
        )
        mask = as_binary_mask(mask, shape=features.shape[:2], name="mask")
        self.entries.append(MemoryEntry(features=features, mask=mask, step=step))
        while len(self.entries) > self.capacity:
            for i, entry in enumerate(self.entries):
                if not entry.pinned:
                    del self.entries[i]
                    self.evictions += 1
                    break
            else:  # everything pinned; keep capacity by dropping nothing more
                break

    def temporal_weights(self, current_step):
        """Per-entry decay weights, normalized to sum to len(self)."""
        if any(current_step < e.step for e in self.entries):
            raise UsageError(
                f"current_step {current_step} precedes a stored insertion step"
            )
        raw = np.empty(len(self.entries))
        for i, entry in enumerate(self.entries):
            if entry.pinned and not self.decay_pinned:
                raw[i] = 1.0
            else:
                raw[i] = self.decay_gamma ** (current_step - entry.step)
        return raw * (len(self.entries) / raw.sum())


@dataclass(frozen=True)
class Snapshot:
    theta: np.ndarray
    phi: np.ndarray
    step: int
    pinned: bool = False


class SnapshotMemory:
    """Bounded store of (parameters, importance) snapshots; the first push
    is pinned and never evicted."""

    def __init__(self, capacity=20):
        if capacity < 1:
            raise ConfigurationError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.snapshots = []
        self.evictions = 0

    def __len__(self):
        return len(self.snapshots)

    @property
    def has_pinned(self):
        return any(s.pinned for s in self.snapshots)

    def push(self, theta, phi, step):
        theta = as_param_vector(theta, name="theta")
        phi = as_param_vector(phi, length=theta.size, name="phi")
        if self.snapshots and theta.size != self.snapshots[0].theta.size:
            raise ConfigurationError(
                f"snapshot length {theta.size} does not match stored length "
                f"{self.snapshots[0].theta.size}"
            )
        if np.any(phi < 0):
            raise ConfigurationError("importance values must be >= 0")
        pinned = not self.snapshots
        self.snapshots.append(Snapshot(theta=theta, phi=phi, step=step, pinned=pinned))
        while len(self.snapshots) > self.capacity:
            for i, snap in enumerate(self.snapshots):
                if not snap.pinned:
                    del self.snapshots[i]
                    self.evictions += 1
                    break
            else:
                break


def dump_frame_memory(memory, directory):
    """Debug dump: JSON index plus one CLVF/PGM pair per entry."""
    from .streams import write_feature_file, write_mask_pgm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, entry in enumerate(memory.entries):
        feature_name = f"entry_{i:03d}.clvf"
        mask_name = f"entry_{i:03d}.pgm"
        write_feature_file(directory / feature_name, entry.features)
        write_mask_pgm(directory / mask_name, entry.mask)
        index.append(
            {
                "slot": i,
                "step": entry.step,
                "pinned": entry.pinned,
                "features": feature_name,
                "mask": mask_name,
            }
        )
    (directory / "memory.json").write_text(
        json.dumps(
            {
                "capacity": memory.capacity,
                "decay_gamma": memory.decay_gamma,
                "entries": index,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )

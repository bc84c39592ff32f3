"""The online-updated predictor: a single same-padded convolution producing
one score map per frame, decoded to a mask by a sigmoid threshold.

Checkpoint format: magic ``CLVM``, little-endian u32 kernel_size,
in_channels, out_channels, then the weights in (kh, kw, in, out) row-major
order and the biases, all float64 little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, StreamFormatError
from .numerics import conv2d_forward
from .validation import as_feature_grid, as_param_vector, as_rng, check_kernel

MODEL_MAGIC = b"CLVM"

# Masks are regressed against {0, 1} targets, so the calibrated decoding
# threshold sits midway between the fitted class scores: raw score 0.5,
# i.e. sigmoid(0.5) in probability space.
CALIBRATED_THRESHOLD = float(expit(0.5))


def decode_mask(scores, threshold=0.5):
    """Binary mask: 1 where sigmoid(score) >= threshold (inclusive)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 3:
        if scores.shape[2] != 1:
            raise ConfigurationError(
                f"decode_mask needs a single-channel score map, got {scores.shape}"
            )
        scores = scores[:, :, 0]
    return (expit(scores) >= threshold).astype(np.uint8)


class ConvPredictor:
    """One-layer convolutional score-map predictor with a flat parameter
    vector view used by the optimizer and the snapshot memory."""

    def __init__(self, weights, bias):
        self.weights, self.bias = check_kernel(weights, bias)

    @classmethod
    def initialize(cls, in_channels, kernel_size=3, seed=0):
        """Zero bias; weights uniform in +-1/sqrt(fan_in)."""
        rng = as_rng(seed)
        fan_in = kernel_size * kernel_size * in_channels
        limit = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-limit, limit, size=(kernel_size, kernel_size, in_channels, 1))
        return cls(weights, np.zeros(1))

    @property
    def kernel_size(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[2]

    @property
    def n_params(self):
        return self.weights.size + self.bias.size

    @property
    def theta(self):
        """Flat copy of all parameters (weights then biases)."""
        return np.concatenate([self.weights.ravel(), self.bias])

    @theta.setter
    def theta(self, value):
        flat = as_param_vector(value, length=self.n_params, name="theta").copy()
        self.weights = flat[: self.weights.size].reshape(self.weights.shape)
        self.bias = flat[self.weights.size :]

    def copy(self):
        return ConvPredictor(self.weights.copy(), self.bias.copy())

    def scores(self, features):
        """Single-channel (H, W) score map for a (H, W, D) feature grid."""
        features = as_feature_grid(features, channels=self.in_channels)
        return conv2d_forward(features, self.weights, self.bias)[:, :, 0]

    def predict_mask(self, features, threshold=0.5):
        return decode_mask(self.scores(features), threshold)

    def save(self, path):
        k, _, cin, cout = self.weights.shape
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<III", k, cin, cout))
            fh.write(self.weights.astype("<f8").tobytes(order="C"))
            fh.write(self.bias.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:4] != MODEL_MAGIC:
            raise StreamFormatError(f"{path.name}: not a CLVM checkpoint")
        k, cin, cout = struct.unpack("<III", raw[4:16])
        n_w = k * k * cin * cout
        expected = 16 + (n_w + cout) * 8
        if len(raw) != expected:
            raise StreamFormatError(
                f"{path.name}: size {len(raw)} does not match header ({expected})"
            )
        values = np.frombuffer(raw, dtype="<f8", offset=16)
        return cls(values[:n_w].reshape(k, k, cin, cout), values[n_w:])

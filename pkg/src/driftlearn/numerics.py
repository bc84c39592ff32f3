"""Same-padded 2-D convolution with analytic gradients, plus a
finite-difference gradient checker.

Everything is float64. The convolution is stride-1 with zero padding of
(k - 1) / 2 so the output keeps the input's spatial size.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .validation import as_feature_grid, as_param_vector, check_kernel


def im2col(grid, kernel_size):
    """Unfold a (H, W, C) grid into patch rows of shape (H*W, k*k*C).

    Row p corresponds to output pixel p (row-major); within a row the
    layout is (kh, kw, channel), matching a (k, k, C, O) weight reshape.
    """
    h, w, c = grid.shape
    pad = (kernel_size - 1) // 2
    padded = np.pad(grid, ((pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (kernel_size, kernel_size), axis=(0, 1)
    )
    # (H, W, C, k, k) -> (H, W, k, k, C) -> (H*W, k*k*C)
    patches = windows.transpose(0, 1, 3, 4, 2)
    return np.ascontiguousarray(patches).reshape(h * w, kernel_size * kernel_size * c)


def conv2d_forward(grid, weights, bias):
    """Convolve (H, W, Cin) with weights (k, k, Cin, Cout) -> (H, W, Cout)."""
    weights, bias = check_kernel(weights, bias)
    grid = as_feature_grid(grid, channels=None, name="conv input")
    k, _, cin, cout = weights.shape
    if grid.shape[2] != cin:
        raise ConfigurationError(
            f"conv input has {grid.shape[2]} channels, kernel expects {cin}"
        )
    patches = im2col(grid, k)
    out = patches @ weights.reshape(k * k * cin, cout) + bias
    return out.reshape(grid.shape[0], grid.shape[1], cout)


def conv2d_backward(grid, weights, upstream):
    """Gradients of a scalar loss through conv2d_forward.

    Given upstream = dLoss/dOutput with shape (H, W, Cout), returns
    (dWeights, dBias, dInput) with the shapes of weights, bias, and grid.
    """
    weights, _ = check_kernel(weights, np.zeros(weights.shape[3]))
    grid = as_feature_grid(grid, channels=None, name="conv input")
    k, _, cin, cout = weights.shape
    if grid.shape[2] != cin:
        raise ConfigurationError(
            f"conv input has {grid.shape[2]} channels, kernel expects {cin}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (grid.shape[0], grid.shape[1], cout):
        raise ConfigurationError(
            f"upstream shape {upstream.shape} does not match output shape "
            f"{(grid.shape[0], grid.shape[1], cout)}"
        )
    h, w, _ = grid.shape
    g = upstream.reshape(h * w, cout)

    patches = im2col(grid, k)
    d_weights = (patches.T @ g).reshape(k, k, cin, cout)
    d_bias = g.sum(axis=0)

    # dInput is the upstream correlated with the spatially flipped kernel.
    g_patches = im2col(upstream, k)  # (H*W, k*k*Cout)
    flipped = weights[::-1, ::-1].transpose(0, 1, 3, 2)  # (k, k, Cout, Cin)
    d_input = (g_patches @ flipped.reshape(k * k * cout, cin)).reshape(h, w, cin)
    return d_weights, d_bias, d_input


def finite_difference_error(f, analytic_grad, params, epsilon=1e-5):
    """Max relative disagreement between an analytic gradient and central
    finite differences of ``f`` at ``params``.

    Per coordinate: |analytic - (f(x+e) - f(x-e)) / 2e| / max(1, |analytic|).
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    params = as_param_vector(params)
    analytic = as_param_vector(analytic_grad, length=params.size, name="analytic_grad")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + epsilon
        hi = float(f(bumped))
        bumped[i] = params[i] - epsilon
        lo = float(f(bumped))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ConfigurationError(
                f"objective returned a non-finite value near coordinate {i}"
            )
        numeric = (hi - lo) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst

"""Differentiable array kernels for the encoder-decoder network.

All activations are (batch, channels, height, width) float arrays. Each
forward kernel returns whatever its backward counterpart needs; nothing here
owns parameters or state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import IndexOutOfWindowError, OddExtentError, ShapeMismatchError

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "maxunpool2x2",
    "maxunpool2x2_backward",
    "relu",
    "relu_backward",
    "softmax_channels",
    "concat_channels",
    "split_channels",
]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, N*H*W) for a same-padded k x k window."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


@dataclass
class ConvCache:
    cols: np.ndarray
    weight: np.ndarray
    x_shape: tuple


def conv2d_forward(x, weight, bias, keep_cache: bool = True):
    """Same-padded cross-correlation with bias.

    weight is (out_channels, in_channels, k, k) with odd k; output spatial
    size equals the input's.
    """
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeMismatchError(
            f"conv2d expects 4D input/weight and 1D bias, got {x.shape}, {weight.shape}, {bias.shape}"
        )
    o, c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatchError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != c or bias.shape[0] != o:
        raise ShapeMismatchError(
            f"channel mismatch: input {x.shape[1]}, weight expects {c}, bias {bias.shape[0]} for {o} filters"
        )
    n, _, h, w = x.shape
    cols = _im2col(x, kh)
    y = weight.reshape(o, c * kh * kw) @ cols
    y += bias[:, None]
    y = y.reshape(o, n, h, w).transpose(1, 0, 2, 3)
    cache = ConvCache(cols if keep_cache else None, weight, x.shape)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache: ConvCache):
    """Gradients of conv2d_forward w.r.t. input, weight and bias."""
    weight = cache.weight
    o, c, k, _ = weight.shape
    n, _, h, w = cache.x_shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, n * h * w)
    cols = cache.cols
    if cols is None:
        raise ShapeMismatchError("conv cache was built without columns")
    dweight = (dy2 @ cols.T).reshape(weight.shape)
    dbias = dy2.sum(axis=1)
    # input gradient is a full correlation of dy with the spatially flipped,
    # channel-transposed weights
    dy_cols = _im2col(dy, k)
    w_flip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
    dx = (w_flip @ dy_cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dweight, dbias


def _windows2x2(x: np.ndarray) -> np.ndarray:
    """(N, C, H/2, W/2, 4) view-copy with windows flattened in row-major order."""
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def maxpool2x2_forward(x):
    """Per-window maximum and the flat in-window index of the winner.

    Ties resolve to the first position in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool expects 4D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise OddExtentError(f"maxpool2x2 needs even spatial extents, got {x.shape[2:]}")
    windows = _windows2x2(x)
    indices = windows.argmax(axis=4).astype(np.uint8)
    values = np.take_along_axis(windows, indices[..., None], axis=4)[..., 0]
    return values, indices


def _scatter2x2(values, indices):
    n, c, h2, w2 = values.shape
    if indices.shape != values.shape:
        raise ShapeMismatchError(
            f"indices shape {indices.shape} does not match values {values.shape}"
        )
    if indices.min(initial=0) < 0 or indices.max(initial=0) > 3:
        raise IndexOutOfWindowError("pool indices must lie in [0, 4)")
    windows = np.zeros((n, c, h2, w2, 4), dtype=values.dtype)
    np.put_along_axis(windows, indices[..., None].astype(np.intp), values[..., None], axis=4)
    return (
        windows.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2 * 2, w2 * 2)
    )


def maxunpool2x2(x, indices):
    """Place each value at its recorded window position; everything else zero."""
    return _scatter2x2(x, indices)


def maxpool2x2_backward(dy, indices):
    """Route pooled gradients back to the argmax positions."""
    return _scatter2x2(dy, indices)


def maxunpool2x2_backward(dy, indices):
    """Gather gradients from the positions the unpool scattered to."""
    windows = _windows2x2(dy)
    return np.take_along_axis(windows, indices[..., None].astype(np.intp), axis=4)[..., 0]


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, activated):
    """Gradient through max(0, .), using the forward output for the mask."""
    return dy * (activated > 0)


def softmax_channels(x):
    """Channel-axis softmax per pixel, numerically stabilized."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate((a, b), axis=1)


def split_channels(dy, first_channels: int):
    return dy[:, :first_channels], dy[:, first_channels:]

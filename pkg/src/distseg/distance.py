"""Signed truncated distance labels for binary building masks.

Converts a mask into per-pixel signed Euclidean distances to the building
boundary (positive inside, negative outside, clamped at a radius), quantizes
the distances into uniform bins usable as classification targets, and decodes
predicted bins back into a mask.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BadThresholdError,
    EmptySeedsError,
    InvalidThresholdError,
    ThresholdMismatchError,
)

__all__ = [
    "BinSpec",
    "SignedDistanceMap",
    "DistanceClassMap",
    "boundary_pixels",
    "squared_edt",
    "signed_truncated_distance",
    "quantize",
    "encode_one_hot",
    "decode_mask",
    "read_mask_png",
    "write_mask_png",
    "read_class_map_png",
    "write_class_map_png",
    "read_sdt",
    "write_sdt",
]


def as_mask(values) -> np.ndarray:
    """Validate and return a 2D uint8 mask of zeros and ones."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"mask must be a non-empty 2D array, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return arr.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class SignedDistanceMap:
    """Per-pixel signed distance to the building boundary, clamped to [-radius, +radius]."""

    values: np.ndarray
    radius: float


@dataclass(frozen=True)
class BinSpec:
    """Uniform quantization of [-radius, +radius] into an even number of bins.

    Zero is an interior bin edge, so bin ``bins // 2`` is the innermost
    positive bin and holds the boundary pixels.
    """

    bins: int
    radius: float
    edges: np.ndarray = field(init=False, repr=False)
    representatives: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.bins < 2 or self.bins % 2 != 0:
            raise ValueError(f"bins must be a positive even integer, got {self.bins}")
        if not self.radius > 0:
            raise InvalidThresholdError(f"radius must be positive, got {self.radius}")
        # edges[k] = radius * (2k - K) / K keeps -R, 0 and +R exact in floats
        k = np.arange(self.bins + 1, dtype=np.float64)
        edges = self.radius * (2.0 * k - self.bins) / self.bins
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "representatives", (edges[:-1] + edges[1:]) / 2.0)


@dataclass(frozen=True)
class DistanceClassMap:
    """Per-pixel bin indices in [0, bins), together with the bin layout used."""

    values: np.ndarray
    binspec: BinSpec


def boundary_pixels(mask) -> np.ndarray:
    """Building pixels with a 4-connected background neighbor.

    The raster edge counts as background, so buildings touching the image
    border are boundary there.
    """
    m = as_mask(mask)
    padded = np.pad(m, 1, constant_values=0)
    background_neighbor = (
        (padded[:-2, 1:-1] == 0)
        | (padded[2:, 1:-1] == 0)
        | (padded[1:-1, :-2] == 0)
        | (padded[1:-1, 2:] == 0)
    )
    return ((m == 1) & background_neighbor).astype(np.uint8)


def squared_edt(seeds) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest set pixel.

    Two-pass separable transform: per-row 1D nearest-seed distances, then the
    lower envelope of parabolas down each column. Output is exact in integer
    arithmetic.
    """
    s = as_mask(seeds)
    if not s.any():
        raise EmptySeedsError("seed mask has no set pixel")
    h, w = s.shape

    # pass 1: squared distance to the nearest seed within each row
    cols = np.arange(w, dtype=np.int64)
    sentinel = np.int64(2 * (h * h + w * w) + 1)
    left = np.where(s == 1, cols, np.int64(-1))
    left = np.maximum.accumulate(left, axis=1)
    d_left = np.where(left >= 0, cols - left, sentinel)
    right = np.where(s == 1, cols, np.int64(w + h + 1))
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    d_right = np.where(right <= w, right - cols, sentinel)
    row_dist = np.minimum(d_left, d_right)
    f = np.where(row_dist >= sentinel, sentinel, row_dist * row_dist)

    # pass 2: per column, lower envelope of the parabolas y -> (y - y')^2 + f[y']
    out = np.empty((h, w), dtype=np.int64)
    ft = np.ascontiguousarray(f.T)
    v = np.empty(h, dtype=np.int64)       # parabola vertices
    z = np.empty(h + 1, dtype=np.float64)  # envelope breakpoints
    ys = np.arange(h, dtype=np.int64)
    y2 = ys * ys
    for x in range(w):
        fcol = ft[x]
        shifted = fcol + y2
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, h):
            s_int = (shifted[q] - shifted[v[k]]) / (2.0 * (q - v[k]))
            while s_int <= z[k]:
                k -= 1
                s_int = (shifted[q] - shifted[v[k]]) / (2.0 * (q - v[k]))
            k += 1
            v[k] = q
            z[k] = s_int
            z[k + 1] = np.inf
        k = 0
        for q in range(h):
            while z[k + 1] < q:
                k += 1
            dy = q - v[k]
            out[q, x] = dy * dy + fcol[v[k]]
    return out


def signed_truncated_distance(mask, radius: float) -> SignedDistanceMap:
    """Signed distance to the boundary set, truncated at ``radius``.

    Positive inside buildings, negative outside, zero exactly on the boundary
    pixels. An all-background mask has no boundary; every pixel then gets
    ``-radius``.
    """
    if not radius > 0:
        raise InvalidThresholdError(f"radius must be positive, got {radius}")
    m = as_mask(mask)
    q = boundary_pixels(m)
    if not q.any():
        values = np.full(m.shape, -float(radius), dtype=np.float64)
        return SignedDistanceMap(values, float(radius))
    dist = np.sqrt(squared_edt(q).astype(np.float64))
    np.minimum(dist, float(radius), out=dist)
    values = np.where(m == 1, dist, -dist)
    return SignedDistanceMap(values, float(radius))


def quantize(sdm: SignedDistanceMap, bins: BinSpec) -> DistanceClassMap:
    """Assign each signed distance to its bin.

    A value on an interior edge (including 0) goes to the higher bin; +radius
    goes to the last bin. Values outside [-radius, +radius] are rejected.
    """
    if sdm.radius != bins.radius:
        raise ThresholdMismatchError(
            f"distance map built with radius {sdm.radius}, bins cover {bins.radius}"
        )
    values = np.asarray(sdm.values, dtype=np.float64)
    idx = np.searchsorted(bins.edges, values, side="right") - 1
    idx[values == bins.radius] = bins.bins - 1
    if (idx < 0).any() or (idx >= bins.bins).any():
        bad = values[(idx < 0) | (idx >= bins.bins)]
        raise ThresholdMismatchError(
            f"distances outside [-{bins.radius}, {bins.radius}]: e.g. {bad.flat[0]}"
        )
    return DistanceClassMap(idx.astype(np.int64), bins)


def encode_one_hot(dcm: DistanceClassMap) -> np.ndarray:
    """Expand bin indices into a (bins, H, W) one-hot raster."""
    k = dcm.binspec.bins
    channels = np.arange(k, dtype=dcm.values.dtype).reshape(k, 1, 1)
    return (dcm.values[None, :, :] == channels).astype(np.uint8)


def decode_mask(dcm: DistanceClassMap, threshold_bin: int | None = None) -> np.ndarray:
    """Mask of pixels whose bin index is at least ``threshold_bin``.

    The default threshold is the innermost positive bin (``bins // 2``), which
    recovers exactly the pixels on or inside the building boundary.
    """
    k = dcm.binspec.bins
    if threshold_bin is None:
        threshold_bin = k // 2
    if not 0 <= threshold_bin <= k - 1:
        raise BadThresholdError(f"threshold_bin {threshold_bin} not in [0, {k - 1}]")
    return (dcm.values >= threshold_bin).astype(np.uint8)


# --- file formats -------------------------------------------------------------

_SDT_MAGIC = b"SDT1"


def write_sdt(path, sdm: SignedDistanceMap) -> None:
    """Write a signed distance raster: magic, u32 height, u32 width, f32 radius,
    then height*width little-endian f32 values in row-major order."""
    values = np.asarray(sdm.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(_SDT_MAGIC)
        fh.write(struct.pack("<IIf", h, w, float(sdm.radius)))
        fh.write(values.tobytes())


def read_sdt(path) -> SignedDistanceMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SDT_MAGIC:
            raise ValueError(f"{path}: not an SDT raster (magic {magic!r})")
        h, w, radius = struct.unpack("<IIf", fh.read(12))
        data = np.frombuffer(fh.read(h * w * 4), dtype="<f4").reshape(h, w)
    return SignedDistanceMap(data.astype(np.float64), float(radius))


def write_mask_png(path, mask) -> None:
    """Write a binary mask as an 8-bit PNG with values 0 and 255."""
    m = as_mask(mask)
    Image.fromarray(m * np.uint8(255), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    """Read an 8-bit PNG and threshold at 128 into a 0/1 mask."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_class_map_png(path, dcm: DistanceClassMap) -> None:
    """Write bin indices as a raw 8-bit single-channel PNG."""
    if dcm.binspec.bins > 256:
        raise ValueError("class map PNG supports at most 256 bins")
    Image.fromarray(dcm.values.astype(np.uint8), mode="L").save(path)


def read_class_map_png(path, bins: BinSpec) -> DistanceClassMap:
    arr = np.asarray(Image.open(path).convert("L")).astype(np.int64)
    if arr.max(initial=0) >= bins.bins:
        raise ValueError(f"{path}: bin index {arr.max()} outside [0, {bins.bins})")
    return DistanceClassMap(arr, bins)

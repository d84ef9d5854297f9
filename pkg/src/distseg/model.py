"""Cascaded two-head encoder-decoder.

The encoder downsamples with 2x2 max pooling while recording argmax indices;
the decoder upsamples by scattering features back to those indices. A first
head predicts distance classes from the final decoder features; its rectified
output is concatenated with those features and fed to the segmentation head,
so the segmentation prediction conditions on learned boundary geometry.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    MissingCacheError,
    NonFiniteError,
    ShapeMismatchError,
)
from .kernels import (
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    maxunpool2x2,
    maxunpool2x2_backward,
    relu,
    relu_backward,
    split_channels,
)

__all__ = ["NetworkConfig", "ForwardOutputs", "CascadeNet", "save_checkpoint", "load_checkpoint"]

S_SEG = "task.s_seg"
S_DIST = "task.s_dist"


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the network. Defaults are desk scale; the full-size original
    (5 stages, VGG16 channel plan) is expressible but slow on CPU."""

    stages: int = 3
    channels_per_stage: tuple = (16, 32, 64)
    convs_per_stage: tuple = (2, 2, 2)
    kernel_size: int = 3
    num_distance_classes: int = 10
    num_seg_classes: int = 2
    input_channels: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(self.channels_per_stage))
        convs = self.convs_per_stage
        if isinstance(convs, int):
            convs = (convs,) * self.stages
        object.__setattr__(self, "convs_per_stage", tuple(convs))
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if len(self.channels_per_stage) != self.stages:
            raise ValueError("channels_per_stage must have one entry per stage")
        if len(self.convs_per_stage) != self.stages:
            raise ValueError("convs_per_stage must have one entry per stage")
        if any(c < 1 for c in self.convs_per_stage):
            raise ValueError("each stage needs at least one convolution")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.num_seg_classes < 2 or self.num_distance_classes < 2:
            raise ValueError("both heads need at least two classes")
        np.dtype(self.dtype)  # validate

    @property
    def pool_factor(self) -> int:
        return 2 ** self.stages


@dataclass
class ForwardOutputs:
    """Full-resolution logits from both heads plus what backward needs."""

    dist_logits: np.ndarray
    seg_logits: np.ndarray
    pool_indices: list
    caches: list | None = field(default=None, repr=False)


def _conv_plan(cfg: NetworkConfig):
    """(name, c_in, c_out) for every convolution in execution order."""
    ch = cfg.channels_per_stage
    plan = []
    for s in range(cfg.stages):
        c_in = cfg.input_channels if s == 0 else ch[s - 1]
        for i in range(cfg.convs_per_stage[s]):
            plan.append((f"enc{s + 1}.conv{i + 1}", c_in if i == 0 else ch[s], ch[s]))
    for s in reversed(range(cfg.stages)):
        c_out_last = ch[s - 1] if s > 0 else ch[0]
        n = cfg.convs_per_stage[s]
        for i in range(n):
            plan.append((f"dec{s + 1}.conv{i + 1}", ch[s], ch[s] if i < n - 1 else c_out_last))
    plan.append(("head_dist", ch[0], cfg.num_distance_classes))
    plan.append(("head_seg", ch[0] + cfg.num_distance_classes, cfg.num_seg_classes))
    return plan


class CascadeNet:
    """Trainable network instance: parameters, gradients, forward and backward.

    ``params`` and ``grads`` map stable names to arrays in a deterministic
    order; the two task log-variances live there as named scalars so the
    optimizer and checkpoints treat them like any other parameter.
    """

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._plan = _conv_plan(config)
        k = config.kernel_size
        rng = np.random.default_rng(seed)
        for name, c_in, c_out in self._plan:
            fan_in = c_in * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
            self.params[f"{name}.weight"] = w.astype(self.dtype)
            self.params[f"{name}.bias"] = np.zeros(c_out, dtype=self.dtype)
        self.params[S_SEG] = np.zeros((), dtype=np.float64)
        self.params[S_DIST] = np.zeros((), dtype=np.float64)
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)
        # log-variances never take weight decay: decaying them toward zero
        # would silently re-weight the tasks
        self.decay_exempt = frozenset({S_SEG, S_DIST})

    # --- parameter access -----------------------------------------------

    @property
    def s_seg(self) -> float:
        return float(self.params[S_SEG])

    @property
    def s_dist(self) -> float:
        return float(self.params[S_DIST])

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- forward / backward ------------------------------------------------

    def _conv(self, name: str, x, tape, keep_cache: bool):
        y, cache = conv2d_forward(
            x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], keep_cache=keep_cache
        )
        if tape is not None:
            tape.append(("conv", name, cache))
        return y

    def forward(self, batch: np.ndarray, want_cache: bool = True) -> ForwardOutputs:
        cfg = self.config
        if batch.ndim != 4 or batch.shape[1] != cfg.input_channels:
            raise ShapeMismatchError(
                f"expected (N, {cfg.input_channels}, H, W) input, got {batch.shape}"
            )
        if batch.shape[2] % cfg.pool_factor or batch.shape[3] % cfg.pool_factor:
            raise ShapeMismatchError(
                f"spatial extents {batch.shape[2:]} must be divisible by {cfg.pool_factor}"
            )
        x = batch.astype(self.dtype, copy=False)
        tape = [] if want_cache else None
        indices = []
        for s in range(cfg.stages):
            for i in range(cfg.convs_per_stage[s]):
                x = self._conv(f"enc{s + 1}.conv{i + 1}", x, tape, want_cache)
                x = relu(x)
                if tape is not None:
                    tape.append(("relu", x))
            x, idx = maxpool2x2_forward(x)
            indices.append(idx)
            if tape is not None:
                tape.append(("pool", idx))
        for s in reversed(range(cfg.stages)):
            x = maxunpool2x2(x, indices[s])
            if tape is not None:
                tape.append(("unpool", indices[s]))
            for i in range(cfg.convs_per_stage[s]):
                x = self._conv(f"dec{s + 1}.conv{i + 1}", x, tape, want_cache)
                x = relu(x)
                if tape is not None:
                    tape.append(("relu", x))
        features = x
        dist_logits, cache_dist = conv2d_forward(
            features, self.params["head_dist.weight"], self.params["head_dist.bias"],
            keep_cache=want_cache,
        )
        rectified = relu(dist_logits)
        merged = concat_channels(features, rectified)
        seg_logits, cache_seg = conv2d_forward(
            merged, self.params["head_seg.weight"], self.params["head_seg.bias"],
            keep_cache=want_cache,
        )
        if not (np.isfinite(dist_logits).all() and np.isfinite(seg_logits).all()):
            raise NonFiniteError("network produced NaN or Inf logits")
        caches = None
        if want_cache:
            caches = [tape, cache_dist, rectified, cache_seg]
        return ForwardOutputs(dist_logits, seg_logits, indices, caches)

    def backward(self, outputs: ForwardOutputs, d_dist_logits, d_seg_logits) -> dict:
        """Accumulate parameter gradients for upstream logit gradients.

        Gradients add into ``self.grads``; call ``zero_grads`` first when a
        fresh accumulation is wanted. Returns the gradient map.
        """
        if outputs.caches is None:
            raise MissingCacheError("forward was run without caches")
        tape, cache_dist, rectified, cache_seg = outputs.caches
        c0 = self.config.channels_per_stage[0]

        d_merged, dw, db = conv2d_backward(d_seg_logits.astype(self.dtype, copy=False), cache_seg)
        self.grads["head_seg.weight"] += dw
        self.grads["head_seg.bias"] += db
        d_features, d_rectified = split_channels(d_merged, c0)
        d_dist_total = d_dist_logits.astype(self.dtype, copy=False) + relu_backward(
            d_rectified, rectified
        )
        d_feat2, dw, db = conv2d_backward(d_dist_total, cache_dist)
        self.grads["head_dist.weight"] += dw
        self.grads["head_dist.bias"] += db
        dx = d_features + d_feat2

        for entry in reversed(tape):
            kind = entry[0]
            if kind == "relu":
                dx = relu_backward(dx, entry[1])
            elif kind == "conv":
                _, name, cache = entry
                dx, dw, db = conv2d_backward(dx, cache)
                self.grads[f"{name}.weight"] += dw
                self.grads[f"{name}.bias"] += db
            elif kind == "pool":
                dx = maxpool2x2_backward(dx, entry[1])
            else:  # unpool
                dx = maxunpool2x2_backward(dx, entry[1])
        return self.grads


# --- checkpoint format ----------------------------------------------------------

_CKPT_MAGIC = b"FCKP"
_CKPT_VERSION = 1
_DTYPE_F32 = 0


def save_checkpoint(model: CascadeNet, path) -> None:
    """Write all named parameters, including the task log-variances, as
    little-endian f32 tensors."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(model.params)))
    for name, arr in model.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", _DTYPE_F32, arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> float64 array map."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BI", data, offset)
        offset += 5
        if tag != _DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack_from(f"<{rank}I", data, offset) if rank else ()
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        tensors[name] = values.reshape(shape).astype(np.float64)
    return tensors


def restore(model: CascadeNet, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into a model, validating names and shapes."""
    missing = set(model.params) - set(tensors)
    extra = set(tensors) - set(model.params)
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, arr in tensors.items():
        target = model.params[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {target.shape}")
        target[...] = arr.astype(target.dtype)

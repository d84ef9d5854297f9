"""Pixel-wise classification losses and the uncertainty-weighted combination.

Each task contributes a mean negative log likelihood. In uncertainty mode a
task's NLL is scaled by exp(-s) and penalized by +s, where s is the trainable
log-variance of that task, so confident tasks take more weight automatically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadClassIndexError, ModeMismatchError, ShapeMismatchError

__all__ = [
    "MODES",
    "TaskWeights",
    "LossConfig",
    "nll_pixelwise",
    "nll_pixelwise_grad",
    "nll_rows",
    "uncertainty_task_loss",
    "total_loss",
    "total_loss_grads",
    "exact_scaled_nll_rows",
    "approx_scaled_nll_rows",
]

MODES = ("seg_only", "dist_only", "multitask_equal", "multitask_uncertainty")


@dataclass
class TaskWeights:
    """Log-variances of the two tasks: s = log(sigma^2)."""

    s_seg: float = 0.0
    s_dist: float = 0.0
    trainable_seg: bool = True
    trainable_dist: bool = True


@dataclass(frozen=True)
class LossConfig:
    mode: str = "multitask_uncertainty"
    lambda_seg: float = 1.0
    lambda_dist: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeMismatchError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_seg <= 0 or self.lambda_dist <= 0:
            raise ValueError("lambda weights must be positive")


def _check_targets(logits, targets):
    if logits.shape[0] != targets.shape[0] or logits.shape[2:] != targets.shape[1:]:
        raise ShapeMismatchError(
            f"logits {logits.shape} incompatible with targets {targets.shape}"
        )
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= logits.shape[1]:
        raise BadClassIndexError(
            f"target indices must lie in [0, {logits.shape[1]}), got "
            f"[{targets.min()}, {targets.max()}]"
        )


def _log_softmax64(logits: np.ndarray, axis: int) -> np.ndarray:
    x = logits.astype(np.float64, copy=False)
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def nll_pixelwise(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over all pixels of -log softmax(logits)[target].

    logits: (N, C, H, W); targets: (N, H, W) integer class indices.
    """
    if logits.ndim != 4 or targets.ndim != 3:
        raise ShapeMismatchError(
            f"expected 4D logits and 3D targets, got {logits.shape}, {targets.shape}"
        )
    _check_targets(logits, targets)
    logp = _log_softmax64(logits, axis=1)
    picked = np.take_along_axis(logp, targets[:, None].astype(np.intp), axis=1)[:, 0]
    return float(-picked.mean())


def nll_pixelwise_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of nll_pixelwise with respect to the logits."""
    _check_targets(logits, targets)
    p = np.exp(_log_softmax64(logits, axis=1))
    idx = targets[:, None].astype(np.intp)
    np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=1) - 1.0, axis=1)
    n_pixels = targets.size
    return (p / n_pixels).astype(logits.dtype, copy=False)


def nll_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[target] for each row of a (N, C) logit matrix."""
    logp = _log_softmax64(logits, axis=1)
    return -logp[np.arange(logits.shape[0]), targets]


def uncertainty_task_loss(nll: float, s: float) -> float:
    """exp(-s) * nll + s: the uncertainty-scaled loss of one task.

    At s = 0 this is exactly the plain NLL; the minimizer over s is ln(nll).
    """
    return math.exp(-s) * nll + s


def total_loss(seg_nll: float, dist_nll: float, weights: TaskWeights, cfg: LossConfig):
    """Combine the two task NLLs according to the configured mode.

    Returns (total, breakdown) where breakdown carries the raw NLLs and the
    log-variances that produced the total.
    """
    mode = cfg.mode
    if mode == "seg_only":
        total = seg_nll
    elif mode == "dist_only":
        total = dist_nll
    elif mode == "multitask_equal":
        total = cfg.lambda_seg * seg_nll + cfg.lambda_dist * dist_nll
    elif mode == "multitask_uncertainty":
        total = uncertainty_task_loss(seg_nll, weights.s_seg) + uncertainty_task_loss(
            dist_nll, weights.s_dist
        )
    else:  # pragma: no cover - LossConfig already validates
        raise ModeMismatchError(mode)
    breakdown = {
        "total": float(total),
        "seg_nll": float(seg_nll),
        "dist_nll": float(dist_nll),
        "s_seg": float(weights.s_seg),
        "s_dist": float(weights.s_dist),
    }
    return float(total), breakdown


def total_loss_grads(seg_nll: float, dist_nll: float, weights: TaskWeights, cfg: LossConfig):
    """d(total)/d(seg_nll), d/d(dist_nll), d/d(s_seg), d/d(s_dist)."""
    mode = cfg.mode
    if mode == "seg_only":
        return 1.0, 0.0, 0.0, 0.0
    if mode == "dist_only":
        return 0.0, 1.0, 0.0, 0.0
    if mode == "multitask_equal":
        return cfg.lambda_seg, cfg.lambda_dist, 0.0, 0.0
    d_seg = math.exp(-weights.s_seg)
    d_dist = math.exp(-weights.s_dist)
    ds_seg = (1.0 - d_seg * seg_nll) if weights.trainable_seg else 0.0
    ds_dist = (1.0 - d_dist * dist_nll) if weights.trainable_dist else 0.0
    return d_seg, d_dist, ds_seg, ds_dist


def exact_scaled_nll_rows(logits: np.ndarray, targets: np.ndarray, sigma_sq: float) -> np.ndarray:
    """Per-row NLL of the sigma-scaled softmax: -log softmax(logits / sigma^2)[target].

    This is the exact form of the uncertainty loss; the trainable objective
    uses the cheaper approximation nll / sigma^2 + log(sigma^2).
    """
    return nll_rows(logits / sigma_sq, targets)


def approx_scaled_nll_rows(logits: np.ndarray, targets: np.ndarray, sigma_sq: float) -> np.ndarray:
    """Per-row approximated uncertainty loss: nll / sigma^2 + log(sigma^2)."""
    return nll_rows(logits, targets) / sigma_sq + math.log(sigma_sq)
